import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from torch import nn

from conftest import IDENTITY_AUG, TINY_DEC, TINY_DROP, TINY_ENC
from priorseg.dataio import AugmentationParams, generate_synthetic, make_partition
from priorseg.segmodel import FeatureDropoutConfig, build_segmodel
from priorseg.shape_prior import (
    DiscriminatorSpec,
    GanTrainConfig,
    GeneratorSpec,
    ShapePriorHandle,
    TrainingDiverged,
    build_critic,
    train_shape_prior,
)
from priorseg.trainer import (
    LossWeights,
    OptimConfig,
    poly_lr,
    pseudo_label,
    supervised_loss,
    total_loss,
    train,
    train_labeled_only_baseline,
    unsupervised_loss,
    unsupervised_terms,
)

FAST_OPT = OptimConfig(init_lr=0.01, epochs=2, labeled_batch=4, unlabeled_batch=4)


class StubModel:
    """Emits fixed logits so loss values are analytically known."""

    def __init__(self, labeled_logits, pseudo_logits=None):
        self.labeled_logits = labeled_logits
        self.pseudo_logits = pseudo_logits if pseudo_logits is not None else labeled_logits

    def encode(self, images):
        return images

    def decode_labeled(self, pyramid):
        return self.labeled_logits

    def decode_pseudo(self, pyramid, dropout_cfg=None, rng=None, training=False):
        return self.pseudo_logits


class ZeroCritic(nn.Module):
    def forward(self, x):
        return x.flatten(1).sum(1) * 0.0


def _tiny_prior(seed=0):
    masks = np.stack([r.mask.astype(np.float32) for r in generate_synthetic(8, 64, seed=seed)])
    return train_shape_prior(
        masks,
        GeneratorSpec(latent_dim=8, base_width=8),
        DiscriminatorSpec(base_width=8),
        GanTrainConfig(batch_size=4, epochs=1, seed=seed),
    )


def test_poly_lr_endpoints_and_midpoint():
    assert poly_lr(0, 1000) == 0.001
    assert poly_lr(1000, 1000) == 0.0
    assert poly_lr(500, 1000) == pytest.approx(0.001 * 0.5**0.9, abs=1e-12)


def test_poly_lr_is_monotone_decreasing():
    values = [poly_lr(i, 100, init_lr=0.01, power=0.9) for i in range(101)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_poly_lr_validates_inputs():
    with pytest.raises(ValueError):
        poly_lr(5, 0)
    with pytest.raises(ValueError):
        poly_lr(-1, 10)
    with pytest.raises(ValueError):
        poly_lr(11, 10)
    with pytest.raises(ValueError):
        poly_lr(1, 10, init_lr=0.0)


def test_supervised_loss_uniform_logits_is_ln2():
    logits = torch.zeros(2, 2, 8, 8)
    masks = torch.randint(0, 2, (2, 8, 8), generator=torch.Generator().manual_seed(0))
    loss = supervised_loss(StubModel(logits), torch.zeros(2, 1, 8, 8), masks)
    assert abs(float(loss) - math.log(2.0)) <= 1e-6


def test_supervised_loss_saturated_correct_logits_vanishes():
    masks = torch.randint(0, 2, (2, 8, 8), generator=torch.Generator().manual_seed(1))
    logits = torch.full((2, 2, 8, 8), -20.0)
    logits.scatter_(1, masks.unsqueeze(1), 20.0)
    loss = supervised_loss(StubModel(logits), torch.zeros(2, 1, 8, 8), masks)
    assert float(loss) < 1e-6


def test_pseudo_label_argmax_ties_and_shift_invariance():
    logits = torch.zeros(1, 2, 4, 4)
    assert pseudo_label(logits).sum() == 0  # ties -> background
    logits[0, 1, 1, 2] = 3.0
    labels = pseudo_label(logits)
    assert labels[0, 1, 2] == 1 and labels.sum() == 1
    shifted = logits + 7.5  # adding a constant to both channels changes nothing
    assert torch.equal(pseudo_label(shifted), labels)
    assert labels.dtype == torch.int64
    assert not labels.requires_grad


def test_unsupervised_terms_prior_free_term_is_exactly_zero(tiny_model):
    images = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(2))
    ce, prior_term = unsupervised_terms(
        tiny_model, None, images, TINY_DROP, torch.Generator().manual_seed(0)
    )
    assert float(prior_term) == 0.0
    assert float(ce.detach()) > 0.0


def test_unsupervised_loss_zero_when_consistent_and_critic_zero():
    # pseudo decoder agrees with the labeled decoder at saturation and the
    # critic scores everything zero -> loss below 1e-6
    labeled = torch.full((2, 2, 64, 64), -20.0)
    labeled[:, 0] = 20.0  # everything background
    prior = ShapePriorHandle(ZeroCritic(), meta={})
    model = StubModel(labeled)
    weights = LossWeights(lambda_prior=1.0, gamma=1.0)
    loss = unsupervised_loss(
        model, prior, torch.zeros(2, 1, 64, 64), weights, TINY_DROP, torch.Generator().manual_seed(0)
    )
    assert float(loss) < 1e-6


def test_unsupervised_loss_prior_weight_affinity(tiny_model):
    prior = _tiny_prior()
    images = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(3))

    def loss_for(lambda_prior):
        rng = torch.Generator().manual_seed(11)  # same dropout draw each call
        weights = LossWeights(lambda_prior=lambda_prior, gamma=1.0)
        return float(
            unsupervised_loss(tiny_model, prior, images, weights, TINY_DROP, rng).detach()
        )

    rng = torch.Generator().manual_seed(11)
    ce, prior_term = unsupervised_terms(tiny_model, prior, images, TINY_DROP, rng)
    ce, prior_term = float(ce.detach()), float(prior_term.detach())
    single = loss_for(0.1) - ce
    double = loss_for(0.2) - ce
    assert abs(double - 2.0 * single) <= 1e-6
    assert abs(single - 0.1 * prior_term) <= 1e-6


def test_unsupervised_loss_reports_batch_ids_on_nonfinite(tiny_model):
    prior = _tiny_prior()
    images = torch.full((2, 1, 64, 64), float("inf"))
    weights = LossWeights()
    with pytest.raises(ValueError, match="case_17"):
        unsupervised_loss(
            tiny_model, prior, images, weights, TINY_DROP,
            torch.Generator().manual_seed(0), batch_ids=["case_17", "case_18"],
        )


def test_unsupervised_loss_gives_labeled_decoder_exactly_zero_gradient(tiny_model):
    prior = _tiny_prior()
    images = torch.rand(2, 1, 64, 64, generator=torch.Generator().manual_seed(4))
    loss = unsupervised_loss(
        tiny_model, prior, images, LossWeights(), TINY_DROP, torch.Generator().manual_seed(0)
    )
    loss.backward()
    for name, param in tiny_model.dec_labeled.named_parameters():
        assert param.grad is None or float(param.grad.abs().max()) == 0.0, name
    assert any(
        param.grad is not None and float(param.grad.abs().max()) > 0.0
        for param in tiny_model.encoder.parameters()
    )
    assert any(
        param.grad is not None and float(param.grad.abs().max()) > 0.0
        for param in tiny_model.dec_pseudo.parameters()
    )


def test_total_loss_gamma_affinity_and_gradient_split():
    a = torch.tensor(1.5, requires_grad=True)
    b = torch.tensor(2.0, requires_grad=True)
    supervised = a * a
    unsupervised = b * b
    weights = LossWeights(lambda_prior=0.1, gamma=0.5)
    total = total_loss(supervised, unsupervised, weights)
    assert abs(float(total.detach()) - (1.5**2 + 0.5 * 2.0**2)) <= 1e-6
    total.backward()
    assert abs(float(a.grad) - 2 * 1.5) <= 1e-6  # d(total)/da = d(sup)/da
    assert abs(float(b.grad) - 0.5 * 2 * 2.0) <= 1e-6  # gamma scales the unsup grad


def _training_setup(count=16, seed=0):
    records = generate_synthetic(count, 64, seed=seed)
    split = make_partition(records, "1/2", val_count=2, test_count=2, seed=seed)
    return records, split


def test_train_runs_and_logs_schedule(tmp_path, tiny_model):
    records, split = _training_setup()
    prior = _tiny_prior()
    result = train(
        tiny_model, prior, split, records, FAST_OPT, LossWeights(), IDENTITY_AUG,
        seed=1, eval_size=64, out_dir=tmp_path,
    )
    iters_per_epoch = math.ceil(len(split.unlabeled_ids) / FAST_OPT.unlabeled_batch)
    assert len(result.iter_rows) == FAST_OPT.epochs * iters_per_epoch
    max_iter = FAST_OPT.epochs * iters_per_epoch
    for row in result.iter_rows:
        assert row["lr"] == poly_lr(row["iteration"], max_iter, FAST_OPT.init_lr, FAST_OPT.lr_power)
        assert math.isfinite(row["loss_total"])
        assert row["loss_total"] == pytest.approx(
            row["loss_sup"] + row["loss_unsup_ce"] + 0.1 * row["loss_unsup_prior"], abs=1e-5
        )
    assert (tmp_path / "logs" / "train_iterations.csv").exists()
    assert (tmp_path / "logs" / "train_iterations.jsonl").exists()
    assert (tmp_path / "logs" / "val_epochs.csv").exists()
    assert (tmp_path / "checkpoints" / "latest.npz").exists()
    assert (tmp_path / "checkpoints" / "best.npz").exists()
    header = (tmp_path / "logs" / "train_iterations.csv").read_text().splitlines()[0]
    assert header == "iteration,lr,loss_sup,loss_unsup_ce,loss_unsup_prior,loss_total"
    assert len(result.epoch_rows) == FAST_OPT.epochs
    assert result.state.best_val_dice is not None


def test_train_is_seed_deterministic():
    records, split = _training_setup()
    prior = _tiny_prior()
    outputs = []
    for _ in range(2):
        model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=7, eval_size=64)
        result = train(
            model, prior, split, records, FAST_OPT, LossWeights(), IDENTITY_AUG, seed=3, eval_size=64
        )
        outputs.append(result)
    losses_a = [row["loss_total"] for row in outputs[0].iter_rows]
    losses_b = [row["loss_total"] for row in outputs[1].iter_rows]
    assert losses_a == losses_b
    for a, b in zip(outputs[0].model.state_dict().values(), outputs[1].model.state_dict().values()):
        assert torch.equal(a, b)


def test_train_resume_reproduces_loss_sequence(tmp_path, monkeypatch):
    records, split = _training_setup(seed=2)
    prior = _tiny_prior()
    opt4 = replace(FAST_OPT, epochs=4)

    straight_model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=5, eval_size=64)
    straight = train(
        straight_model, prior, split, records, opt4, LossWeights(), IDENTITY_AUG, seed=9, eval_size=64
    )

    # crash the same run during its third epoch, after two checkpoints exist
    from priorseg import trainer as trainer_module

    real_validate = trainer_module._validate
    calls = {"n": 0}

    def crashing_validate(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] > 2:
            raise RuntimeError("simulated crash")
        return real_validate(*args, **kwargs)

    monkeypatch.setattr(trainer_module, "_validate", crashing_validate)
    part_model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=5, eval_size=64)
    with pytest.raises(RuntimeError, match="simulated crash"):
        train(
            part_model, prior, split, records, opt4, LossWeights(), IDENTITY_AUG,
            seed=9, eval_size=64, out_dir=tmp_path / "run",
        )
    monkeypatch.setattr(trainer_module, "_validate", real_validate)

    resumed_model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=99, eval_size=64)
    second = train(
        resumed_model, prior, split, records, opt4, LossWeights(), IDENTITY_AUG,
        seed=9, eval_size=64, out_dir=tmp_path / "run",
        resume_from=tmp_path / "run" / "checkpoints" / "latest.npz",
    )

    # the bundle was written at the end of epoch 1, so the resumed run must
    # replay epochs 2 and 3 exactly
    iters_per_epoch = len(straight.iter_rows) // opt4.epochs
    assert second.iter_rows == straight.iter_rows[2 * iters_per_epoch:]
    for a, b in zip(straight.model.state_dict().values(), second.model.state_dict().values()):
        assert torch.equal(a, b)


def test_labeled_only_baseline_matches_train_on_empty_pool():
    records, split = _training_setup(seed=3)
    emptied = replace(split, unlabeled_ids=())

    model_a = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=2, eval_size=64)
    via_train = train(
        model_a, None, emptied, records, FAST_OPT,
        LossWeights(lambda_prior=0.7, gamma=4.0),  # gamma must be irrelevant here
        IDENTITY_AUG, seed=6, eval_size=64,
    )
    model_b = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=2, eval_size=64)
    baseline = train_labeled_only_baseline(
        model_b, split, records, FAST_OPT, IDENTITY_AUG, seed=6, eval_size=64
    )

    for a, b in zip(via_train.model.state_dict().values(), baseline.model.state_dict().values()):
        assert torch.equal(a, b)
    assert [r["loss_total"] for r in via_train.iter_rows] == [r["loss_total"] for r in baseline.iter_rows]
    assert all(row["loss_unsup_ce"] == 0.0 and row["loss_unsup_prior"] == 0.0 for row in baseline.iter_rows)


def test_train_without_prior_logs_zero_prior_column(tiny_model):
    records, split = _training_setup(seed=4)
    result = train(
        tiny_model, None, split, records, replace(FAST_OPT, epochs=1), LossWeights(),
        IDENTITY_AUG, seed=0, eval_size=64,
    )
    assert all(row["loss_unsup_prior"] == 0.0 for row in result.iter_rows)
    assert all(row["loss_unsup_ce"] > 0.0 for row in result.iter_rows)


def test_train_divergence_aborts_with_batch_ids(tiny_model):
    # NaN pixels survive every layer, so whichever batch samples the poisoned
    # record produces a non-finite loss; one epoch visits the whole pool
    records, split = _training_setup(seed=5)
    poisoned = []
    for record in records:
        if record.id == split.labeled_ids[0]:
            bad = record.image.copy()
            bad[:] = np.nan
            poisoned.append(replace(record, image=bad))
        else:
            poisoned.append(record)
    with pytest.raises(TrainingDiverged, match=split.labeled_ids[0]):
        train(
            tiny_model, None, split, poisoned, replace(FAST_OPT, epochs=1), LossWeights(),
            IDENTITY_AUG, seed=0, eval_size=64,
        )


def test_train_validates_split_against_records(tiny_model):
    records, split = _training_setup(seed=6)
    with pytest.raises(KeyError, match="ghost"):
        train(
            tiny_model, None, replace(split, labeled_ids=split.labeled_ids + ("ghost",)),
            records, FAST_OPT, LossWeights(), IDENTITY_AUG, seed=0,
        )
    stripped = [replace(r, mask=None) if r.id == split.labeled_ids[0] else r for r in records]
    with pytest.raises(ValueError, match="mask"):
        train(tiny_model, None, split, stripped, FAST_OPT, LossWeights(), IDENTITY_AUG, seed=0)


def test_train_zero_epochs_returns_initial_model():
    model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=8, eval_size=64)
    reference = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=8, eval_size=64)
    records, split = _training_setup(seed=7)
    result = train(
        model, None, split, records, replace(FAST_OPT, epochs=0), LossWeights(), IDENTITY_AUG, seed=0
    )
    assert result.iter_rows == [] and result.epoch_rows == []
    for a, b in zip(result.model.state_dict().values(), reference.state_dict().values()):
        assert torch.equal(a, b)


def test_gamma_rampup_scales_totals():
    records, split = _training_setup(seed=8)
    prior = None
    rows = {}
    for ramp in (0, 8):
        model = build_segmodel(TINY_ENC, TINY_DEC, TINY_DROP, seed=3, eval_size=64)
        weights = LossWeights(lambda_prior=0.0, gamma=1.0, gamma_rampup_iters=ramp)
        result = train(
            model, prior, split, records, replace(FAST_OPT, epochs=1), weights, IDENTITY_AUG,
            seed=4, eval_size=64,
        )
        rows[ramp] = result.iter_rows
    # identical first batches, but the ramped run downweights the unsupervised term
    flat_row = rows[0][0]
    ramp_row = rows[8][0]
    assert ramp_row["loss_sup"] == flat_row["loss_sup"]
    assert ramp_row["loss_unsup_ce"] == flat_row["loss_unsup_ce"]
    expected = ramp_row["loss_sup"] + (1 / 8) * ramp_row["loss_unsup_ce"]
    assert ramp_row["loss_total"] == pytest.approx(expected, abs=1e-6)
