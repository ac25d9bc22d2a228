"""Joint training of the twin-decoder network.

Per iteration the loop draws one labeled and one unlabeled batch, computes

* supervised: cross-entropy of the labeled decoder on ground-truth masks,
* unsupervised: cross-entropy of the pseudo decoder (under feature dropout)
  against hard pseudo-labels from the labeled decoder, plus a weighted
  shape-prior term on its predicted soft masks,

and steps SGD on ``supervised + gamma * unsupervised`` with a polynomially
decaying learning rate.  Pseudo-labels are fully detached: the labeled
decoder receives no gradient from the unsupervised path, and the encoder
receives it only through the pseudo branch.
"""
from __future__ import annotations

import copy
import csv
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .dataio import AugmentationParams, DatasetSplit, ImageRecord, PoolCycler, augment
from .metrics import dice
from .segmodel import FeatureDropoutConfig, SegModel, foreground_prob_64, save_segmodel
from .shape_prior import ShapePriorHandle, TrainingDiverged, shape_prior_loss

ITER_COLUMNS = ("iteration", "lr", "loss_sup", "loss_unsup_ce", "loss_unsup_prior", "loss_total")
EPOCH_COLUMNS = ("epoch", "iteration", "val_dice", "best_val_dice")


@dataclass(frozen=True)
class LossWeights:
    """lambda_prior scales the shape-prior term inside the unsupervised
    loss; gamma scales the whole unsupervised loss in the total."""

    lambda_prior: float = 0.1
    gamma: float = 1.0
    gamma_rampup_iters: int = 0

    def __post_init__(self) -> None:
        if self.gamma_rampup_iters < 0:
            raise ValueError("gamma_rampup_iters must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    init_lr: float = 1e-3
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-5
    epochs: int = 200
    labeled_batch: int = 8
    unlabeled_batch: int = 8

    def __post_init__(self) -> None:
        if self.init_lr <= 0.0:
            raise ValueError("init_lr must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.labeled_batch < 1:
            raise ValueError("labeled_batch must be >= 1")
        if self.unlabeled_batch < 0:
            raise ValueError("unlabeled_batch must be >= 0")


@dataclass
class TrainState:
    iteration: int
    epoch: int
    best_val_dice: float | None
    best_epoch: int | None


@dataclass
class TrainResult:
    model: SegModel
    iter_rows: list[dict]
    epoch_rows: list[dict]
    state: TrainState


def poly_lr(iteration: int, max_iter: int, init_lr: float = 1e-3, power: float = 0.9) -> float:
    """init_lr * (1 - iteration/max_iter) ** power."""
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    if not 0 <= iteration <= max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {max_iter}]")
    if init_lr <= 0.0 or power <= 0.0:
        raise ValueError("init_lr and power must be positive")
    return init_lr * (1.0 - iteration / max_iter) ** power


def supervised_loss(model, images: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of the labeled branch against ground-truth masks."""
    logits = model.decode_labeled(model.encode(images))
    return F.cross_entropy(logits, masks.long())


def pseudo_label(logits: torch.Tensor) -> torch.Tensor:
    """Hard per-pixel argmax, detached; ties resolve to background."""
    with torch.no_grad():
        return (logits[:, 1] > logits[:, 0]).long()


def unsupervised_terms(
    model,
    prior: ShapePriorHandle | None,
    images: torch.Tensor,
    dropout_cfg: FeatureDropoutConfig,
    rng: torch.Generator | None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Consistency cross-entropy and shape-prior term for an unlabeled batch.

    The pseudo-label branch runs without gradient tracking, so only the
    pseudo decoder (and through it the encoder) is trainable here.  With no
    prior the second term is exactly zero.
    """
    pyramid = model.encode(images)
    with torch.no_grad():
        targets = pseudo_label(model.decode_labeled(pyramid))
    logits = model.decode_pseudo(pyramid, dropout_cfg, rng=rng, training=True)
    ce = F.cross_entropy(logits, targets)
    if prior is None:
        prior_term = torch.zeros((), dtype=ce.dtype)
    else:
        prior_term = shape_prior_loss(prior, foreground_prob_64(logits))
    return ce, prior_term


def unsupervised_loss(
    model,
    prior: ShapePriorHandle | None,
    images: torch.Tensor,
    weights: LossWeights,
    dropout_cfg: FeatureDropoutConfig,
    rng: torch.Generator | None,
    batch_ids: Sequence[str] | None = None,
) -> torch.Tensor:
    ce, prior_term = unsupervised_terms(model, prior, images, dropout_cfg, rng)
    loss = ce + weights.lambda_prior * prior_term
    if not torch.isfinite(loss):
        ids = list(batch_ids) if batch_ids else "<unknown>"
        raise ValueError(
            f"non-finite unsupervised loss (ce={ce.detach().item()!r}, "
            f"prior={prior_term.detach().item()!r}); batch ids: {ids}"
        )
    return loss


def total_loss(supervised: torch.Tensor, unsupervised: torch.Tensor, weights: LossWeights) -> torch.Tensor:
    return supervised + weights.gamma * unsupervised


def _effective_gamma(weights: LossWeights, iteration: int) -> float:
    if weights.gamma_rampup_iters > 0:
        return weights.gamma * min(1.0, (iteration + 1) / weights.gamma_rampup_iters)
    return weights.gamma


def _records_by_id(records: Mapping[str, ImageRecord] | Sequence[ImageRecord]) -> dict[str, ImageRecord]:
    if isinstance(records, Mapping):
        return dict(records)
    return {r.id: r for r in records}


class _RowLogger:
    """Append rows to a CSV file and a JSONL mirror; everything it writes is
    value-derived, so identical runs produce identical bytes."""

    def __init__(self, path_base: Path | None, columns: tuple[str, ...], resume: bool):
        self.columns = columns
        self._csv: IO[str] | None = None
        self._jsonl: IO[str] | None = None
        if path_base is not None:
            path_base.parent.mkdir(parents=True, exist_ok=True)
            csv_path = path_base.with_suffix(".csv")
            mode = "a" if resume and csv_path.exists() else "w"
            self._csv = open(csv_path, mode, newline="")
            self._jsonl = open(path_base.with_suffix(".jsonl"), mode)
            if mode == "w":
                csv.writer(self._csv).writerow(columns)

    def write(self, row: dict) -> None:
        if self._csv is None:
            return
        values = []
        for col in self.columns:
            value = row[col]
            if value is None:
                values.append("")
            elif isinstance(value, float):
                values.append(repr(value))
            else:
                values.append(value)
        csv.writer(self._csv).writerow(values)
        assert self._jsonl is not None
        self._jsonl.write(json.dumps({c: row[c] for c in self.columns}) + "\n")

    def flush(self) -> None:
        if self._csv is not None:
            self._csv.flush()
            assert self._jsonl is not None
            self._jsonl.flush()

    def close(self) -> None:
        if self._csv is not None:
            self._csv.close()
            assert self._jsonl is not None
            self._jsonl.close()


def _momentum_arrays(model: SegModel, optimizer: torch.optim.SGD) -> dict[str, np.ndarray]:
    arrays = {}
    for name, param in model.named_parameters():
        state = optimizer.state.get(param)
        if state and state.get("momentum_buffer") is not None:
            arrays[f"momentum.{name}"] = state["momentum_buffer"].detach().cpu().numpy()
    return arrays


def _restore_momentum(model: SegModel, optimizer: torch.optim.SGD, arrays: Mapping[str, np.ndarray]) -> None:
    for name, param in model.named_parameters():
        key = f"momentum.{name}"
        if key in arrays:
            optimizer.state[param] = {"momentum_buffer": torch.as_tensor(np.asarray(arrays[key]))}


def _validate(model: SegModel, records: Sequence[ImageRecord], eval_size: int | None) -> float:
    scores = []
    for record in records:
        if record.mask is None:
            raise ValueError(f"validation record {record.id!r} has no mask")
        scores.append(dice(model.predict_mask(record.image, eval_size=eval_size), record.mask))
    return float(np.mean(scores))


def train(
    model: SegModel,
    prior: ShapePriorHandle | None,
    split: DatasetSplit,
    records: Mapping[str, ImageRecord] | Sequence[ImageRecord],
    optim_cfg: OptimConfig,
    weights: LossWeights,
    aug_params: AugmentationParams,
    *,
    seed: int,
    dropout_cfg: FeatureDropoutConfig | None = None,
    eval_size: int | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Run the joint loop; returns the best-validation model (final model
    when there is no validation set).

    With ``out_dir`` set, per-iteration and per-epoch logs stream to
    ``logs/`` as CSV plus JSONL, the best model goes to
    ``checkpoints/best.npz`` and a resume-safe bundle (model, momentum, rng
    and sampler states, counters) to ``checkpoints/latest.npz``.  A resumed
    run continues the loss sequence exactly as if it had never stopped.

    An empty unlabeled pool degenerates to purely supervised training; gamma
    then never enters any update.
    """
    by_id = _records_by_id(records)
    dropout_cfg = dropout_cfg or model.dropout_cfg
    for rid in split.labeled_ids + split.val_ids:
        if rid not in by_id:
            raise KeyError(f"split references unknown record id {rid!r}")
        if by_id[rid].mask is None:
            raise ValueError(f"record {rid!r} needs a mask for training/validation")
    for rid in split.unlabeled_ids:
        if rid not in by_id:
            raise KeyError(f"split references unknown record id {rid!r}")

    semi = len(split.unlabeled_ids) > 0 and optim_cfg.unlabeled_batch > 0
    iters_labeled = math.ceil(len(split.labeled_ids) / optim_cfg.labeled_batch)
    if semi:
        iters_per_epoch = max(iters_labeled, math.ceil(len(split.unlabeled_ids) / optim_cfg.unlabeled_batch))
    else:
        iters_per_epoch = iters_labeled
    max_iter = optim_cfg.epochs * iters_per_epoch

    children = np.random.SeedSequence(seed).spawn(4)
    aug_rng = np.random.default_rng(children[0])
    lab_cycler = PoolCycler(split.labeled_ids, optim_cfg.labeled_batch, np.random.default_rng(children[1]))
    unl_cycler = (
        PoolCycler(split.unlabeled_ids, optim_cfg.unlabeled_batch, np.random.default_rng(children[2]))
        if semi
        else None
    )
    dropout_rng = torch.Generator().manual_seed(int(children[3].generate_state(1)[0]))

    optimizer = torch.optim.SGD(
        model.parameters(),
        lr=optim_cfg.init_lr,
        momentum=optim_cfg.momentum,
        weight_decay=optim_cfg.weight_decay,
    )

    start_epoch = 0
    best_val = None
    best_epoch = None
    best_state: dict[str, torch.Tensor] | None = None
    iteration = 0
    if resume_from is not None:
        arrays, meta = checkpoint.load_npz(resume_from)
        checkpoint.expect_kind(meta, "train_state", resume_from)
        checkpoint.load_module_arrays(model, arrays, prefix="model.")
        _restore_momentum(model, optimizer, arrays)
        if any(k.startswith("best.") for k in arrays):
            best_state = {
                k[len("best."):]: torch.as_tensor(np.asarray(v))
                for k, v in arrays.items()
                if k.startswith("best.")
            }
        dropout_rng.set_state(torch.as_tensor(np.asarray(arrays["rng.dropout"])))
        aug_rng.bit_generator.state = meta["aug_rng_state"]
        lab_cycler.set_state(meta["labeled_cycler"])
        if unl_cycler is not None:
            if meta.get("unlabeled_cycler") is None:
                raise ValueError("resume state has no unlabeled sampler but the split does")
            unl_cycler.set_state(meta["unlabeled_cycler"])
        iteration = int(meta["iteration"])
        start_epoch = int(meta["epoch"]) + 1
        best_val = meta.get("best_val_dice")
        best_epoch = meta.get("best_epoch")

    out_dir = Path(out_dir) if out_dir is not None else None
    resume = resume_from is not None
    iter_log = _RowLogger(out_dir / "logs" / "train_iterations" if out_dir else None, ITER_COLUMNS, resume)
    epoch_log = _RowLogger(out_dir / "logs" / "val_epochs" if out_dir else None, EPOCH_COLUMNS, resume)

    def _batch(ids: list[str], with_mask: bool) -> tuple[torch.Tensor, torch.Tensor | None]:
        images, masks = [], []
        for rid in ids:
            record = by_id[rid]
            if not with_mask and record.mask is not None:
                record = replace(record, mask=None)  # unlabeled path never sees masks
            out = augment(record, aug_params, aug_rng)
            images.append(out.image)
            if with_mask:
                masks.append(out.mask)
        x = torch.from_numpy(np.stack(images))[:, None]  # [B,1,S,S]
        y = torch.from_numpy(np.stack(masks).astype(np.int64)) if with_mask else None
        return x, y

    def _save_latest(epoch: int) -> None:
        if out_dir is None:
            return
        arrays = checkpoint.module_arrays(model, prefix="model.")
        arrays.update(_momentum_arrays(model, optimizer))
        if best_state is not None:
            arrays.update({f"best.{k}": v.detach().cpu().numpy() for k, v in best_state.items()})
        arrays["rng.dropout"] = dropout_rng.get_state().numpy()
        meta = {
            "kind": "train_state",
            "iteration": iteration,
            "epoch": epoch,
            "best_val_dice": best_val,
            "best_epoch": best_epoch,
            "seed": seed,
            "semi": semi,
            "optim_config": asdict(optim_cfg),
            "loss_weights": asdict(weights),
            "aug_rng_state": aug_rng.bit_generator.state,
            "labeled_cycler": lab_cycler.state(),
            "unlabeled_cycler": unl_cycler.state() if unl_cycler is not None else None,
        }
        checkpoint.save_npz(out_dir / "checkpoints" / "latest.npz", arrays, meta)

    iter_rows: list[dict] = []
    epoch_rows: list[dict] = []
    val_records = [by_id[rid] for rid in split.val_ids]

    try:
        for epoch in range(start_epoch, optim_cfg.epochs):
            model.train()
            for _ in range(iters_per_epoch):
                lr = poly_lr(iteration, max_iter, optim_cfg.init_lr, optim_cfg.lr_power)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                lab_ids = lab_cycler.next_batch()
                x_lab, y_lab = _batch(lab_ids, with_mask=True)
                loss_sup = supervised_loss(model, x_lab, y_lab)

                unl_ids: list[str] = []
                if semi:
                    assert unl_cycler is not None
                    unl_ids = unl_cycler.next_batch()
                    x_unl, _ = _batch(unl_ids, with_mask=False)
                    ce_u, prior_u = unsupervised_terms(model, prior, x_unl, dropout_cfg, dropout_rng)
                    loss_unsup = ce_u + weights.lambda_prior * prior_u
                    gamma = _effective_gamma(weights, iteration)
                    loss = loss_sup + gamma * loss_unsup
                else:
                    ce_u = prior_u = torch.zeros(())
                    loss = loss_sup

                # Last epoch's resume bundle stays on disk untouched if we abort here.
                if not torch.isfinite(loss):
                    raise TrainingDiverged(
                        f"non-finite loss at iteration {iteration} "
                        f"(sup={loss_sup.detach().item()!r}, unsup_ce={ce_u.detach().item()!r}, "
                        f"prior={prior_u.detach().item()!r}); "
                        f"labeled batch {lab_ids}, unlabeled batch {unl_ids}"
                    )

                optimizer.zero_grad()
                loss.backward()
                optimizer.step()

                row = {
                    "iteration": iteration,
                    "lr": lr,
                    "loss_sup": float(loss_sup.detach()),
                    "loss_unsup_ce": float(ce_u.detach()),
                    "loss_unsup_prior": float(prior_u.detach()),
                    "loss_total": float(loss.detach()),
                }
                iter_rows.append(row)
                iter_log.write(row)
                iteration += 1

            # Supervised-only runs optimize the labeled branch, but prediction
            # is served by the pseudo branch; keep the served decoder in
            # lockstep so validation and checkpoints reflect the trained net.
            if not semi:
                model.dec_pseudo.load_state_dict(model.dec_labeled.state_dict())

            val_dice = _validate(model, val_records, eval_size) if val_records else None
            if val_dice is not None and (best_val is None or val_dice > best_val):
                best_val = val_dice
                best_epoch = epoch
                best_state = copy.deepcopy(model.state_dict())
                if out_dir is not None:
                    save_segmodel(
                        model,
                        out_dir / "checkpoints" / "best.npz",
                        extra_meta={"best_val_dice": best_val, "best_epoch": best_epoch, "seed": seed},
                    )
            row = {
                "epoch": epoch,
                "iteration": iteration,
                "val_dice": val_dice,
                "best_val_dice": best_val,
            }
            epoch_rows.append(row)
            epoch_log.write(row)
            _save_latest(epoch)
            iter_log.flush()
            epoch_log.flush()
    finally:
        iter_log.close()
        epoch_log.close()

    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(
        model=model,
        iter_rows=iter_rows,
        epoch_rows=epoch_rows,
        state=TrainState(iteration, optim_cfg.epochs - 1, best_val, best_epoch),
    )


def train_labeled_only_baseline(
    model: SegModel,
    split: DatasetSplit,
    records: Mapping[str, ImageRecord] | Sequence[ImageRecord],
    optim_cfg: OptimConfig,
    aug_params: AugmentationParams,
    *,
    seed: int,
    eval_size: int | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Supervised-only arm: identical to :func:`train` on an emptied
    unlabeled pool, so the two produce byte-identical parameters."""
    supervised_split = replace(split, unlabeled_ids=())
    return train(
        model,
        None,
        supervised_split,
        records,
        optim_cfg,
        LossWeights(lambda_prior=0.0, gamma=0.0),
        aug_params,
        seed=seed,
        eval_size=eval_size,
        out_dir=out_dir,
        resume_from=resume_from,
    )
