"""Training loops: network training, direct per-voxel field optimization,
the constant-seeded trial protocol, and model selection.

All pseudo-randomness within a trial flows from the trial seed: parameter
initialization and the per-epoch shuffle both use generators seeded with it,
so repeated runs with identical (seed, config, data) are bit-identical.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .data import AtlasBundle, Case, LoadedDataset
from .errors import DataError, NumericalError, UsageError
from .graph import Graph, ParamStore
from .losses import LossWeights, attach_variant_loss
from .metrics import MetricsRecord, dice, hd95, summarize_records
from .unet import (Checkpoint, UNetConfig, build_unet, checkpoint_from_store,
                   init_params, store_from_checkpoint)
from .warp import (DeformationField, marching_cubes_surface, project_surface,
                   rasterize_projected_mask)

SELECTION_RULES = ("min_selfsup_val_loss", "max_val_dice")


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "new"
    weights: LossWeights = field(default_factory=LossWeights)
    unet: UNetConfig = field(default_factory=UNetConfig)
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    batch_size: int = 1
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    t_lower_mm: float = 1.0
    t_upper_mm: float = 4.0
    augment: bool = False
    augment_k: int = 3
    augment_amplitude: float = 0.8
    selection: str = "min_selfsup_val_loss"
    direct_lr: float = 0.03
    direct_iters: int = 500

    def __post_init__(self):
        if self.epochs < 1:
            raise UsageError("epochs must be >= 1")
        if self.lr < 0:
            raise UsageError("learning rate must be >= 0")
        if self.batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        if len(self.seeds) < 1:
            raise UsageError("at least one trial seed is required")
        if self.selection not in SELECTION_RULES:
            raise UsageError(f"selection must be one of {SELECTION_RULES}")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


class Adam:
    """Textbook Adam; moment buffers live in the ParamStore."""

    def __init__(self, store: ParamStore, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.store = store
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name in self.store.names():
            g = grads[name]
            m = self.store.m[name]
            v = self.store.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            m_hat = m / (1.0 - b1 ** self.t)
            v_hat = v / (1.0 - b2 ** self.t)
            self.store.blocks[name] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrialResult:
    seed: int
    epochs: list[dict]
    selected_epoch: int
    checkpoint: Checkpoint
    val_metrics: dict[str, dict]

    @property
    def checkpoint_id(self) -> str:
        return f"epoch{self.selected_epoch:03d}"


def select_model(history: list[dict], rule: str) -> int:
    """Index of the selected epoch; ties resolve to the earliest epoch."""
    if not history:
        raise UsageError("cannot select a model from an empty history")
    if rule == "min_selfsup_val_loss":
        values = [h["val_loss"] for h in history]
        best = min(values)
    elif rule == "max_val_dice":
        values = [-h["val_dice"] for h in history]
        best = min(values)
    else:
        raise UsageError(f"unknown selection rule {rule!r}")
    return values.index(best)


class _TrainingGraph:
    """Network + warp + variant loss assembled once and reused per step."""

    def __init__(self, cfg: TrainConfig, atlas: AtlasBundle, store: ParamStore):
        g, image, field_node = build_unet(cfg.unet, store)
        warped = g.grid_sample(image, field_node)
        weight_map = atlas.weights.volume.data if atlas.weights is not None else None
        total, terms = attach_variant_loss(
            g, warped, field_node, atlas.image.data, atlas.mask.data,
            weight_map, cfg.weights, cfg.variant)
        self.graph = g
        self.image = image
        self.field = field_node
        self.total = total
        self.terms = terms
        self.cfg = cfg

    def run(self, volume_data: np.ndarray, with_grad: bool) -> dict[str, float]:
        self.graph.bind(self.image, volume_data.reshape(1, *volume_data.shape))
        self.graph.forward()
        total = float(self.total.value)
        if not np.isfinite(total):
            raise NumericalError(f"non-finite training loss {total}")
        if with_grad:
            self.graph.backward(self.total)
        out = {name: float(node.value) for name, node in self.terms.items()}
        out["total"] = total
        return out

    def param_grads(self) -> dict[str, np.ndarray]:
        return {name: node.grad for name, node in self.graph.param_nodes.items()}


def train(dataset: LoadedDataset, atlas: AtlasBundle, cfg: TrainConfig, seed: int,
          log_path=None) -> TrialResult:
    """One training trial; every PRNG is seeded with the trial constant."""
    if not dataset.train:
        raise DataError("training split is empty")
    store = init_params(cfg.unet, seed)
    shuffle_rng = np.random.Generator(np.random.PCG64(seed))
    tg = _TrainingGraph(cfg, atlas, store)
    opt = Adam(store, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)

    needs_dice = cfg.selection == "max_val_dice"
    if needs_dice and any(c.gt_mask is None for c in dataset.val):
        raise DataError("max_val_dice selection requires ground truth on the validation split")

    log_fh = open(log_path, "w") if log_path else None
    history: list[dict] = []
    best_params: dict[str, np.ndarray] | None = None
    best_index = -1
    accum = {name: np.zeros_like(b) for name, b in store.blocks.items()}

    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            order = shuffle_rng.permutation(len(dataset.train))
            sums: dict[str, float] = {}
            count = 0
            for start in range(0, len(order), cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                for a in accum.values():
                    a.fill(0.0)
                for j in batch:
                    case = dataset.train[int(j)]
                    try:
                        terms = tg.run(case.image.data, with_grad=True)
                    except NumericalError as exc:
                        raise NumericalError(
                            f"trial seed={seed} aborted at epoch {epoch}, "
                            f"case {case.case_id}: {exc}") from exc
                    for name, g in tg.param_grads().items():
                        accum[name] += g
                    for k, v in terms.items():
                        sums[k] = sums.get(k, 0.0) + v
                    count += 1
                if len(batch) > 1:
                    for a in accum.values():
                        a /= len(batch)
                opt.step(accum)

            record = {"epoch": epoch}
            record.update({k: sums[k] / count for k in sorted(sums)})
            record["val_loss"] = _mean_val_loss(tg, dataset.val) if dataset.val else record["total"]
            if needs_dice:
                record["val_dice"] = float(np.mean([
                    _case_dice(store, cfg, atlas, c) for c in dataset.val]))
            record["wall_time_s"] = time.perf_counter() - t0
            history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record, sort_keys=True) + "\n")
                log_fh.flush()

            chosen = select_model(history, cfg.selection)
            if chosen != best_index:
                best_index = chosen
                best_params = {k: v.copy() for k, v in store.blocks.items()}
    finally:
        if log_fh:
            log_fh.close()

    selected = select_model(history, cfg.selection)
    assert selected == best_index and best_params is not None
    for name, block in best_params.items():
        store.blocks[name][...] = block

    val_metrics = {}
    for case in dataset.val:
        entry = {"loss": _case_loss(tg, case)}
        if case.gt_mask is not None:
            entry["dice"] = _case_dice(store, cfg, atlas, case)
        val_metrics[case.case_id] = entry

    ckpt = checkpoint_from_store(
        cfg.unet, store,
        metadata={"seed": seed, "epoch": selected, "loss_variant": cfg.variant})
    return TrialResult(seed, history, selected, ckpt, val_metrics)


def _mean_val_loss(tg: _TrainingGraph, cases: list[Case]) -> float:
    return float(np.mean([_case_loss(tg, c) for c in cases]))


def _case_loss(tg: _TrainingGraph, case: Case) -> float:
    return tg.run(case.image.data, with_grad=False)["total"]


def predict_field(store: ParamStore, unet_cfg: UNetConfig, image) -> DeformationField:
    """Forward the network on a preprocessed volume; displacement in voxels."""
    g, inp, field_node = build_unet(unet_cfg, store)
    g.bind(inp, image.data.reshape(1, *image.data.shape))
    g.forward()
    return DeformationField(field_node.value.copy(), image.spacing)


def _case_dice(store: ParamStore, cfg: TrainConfig, atlas: AtlasBundle, case: Case) -> float:
    f = predict_field(store, cfg.unet, case.image)
    predicted = rasterize_projected_mask(atlas.mask, f)
    return dice(predicted, case.gt_mask, case.exclusion_mask)


def evaluate_case(store: ParamStore, cfg: TrainConfig, atlas: AtlasBundle,
                  case: Case, seed: int, method: str) -> MetricsRecord:
    if case.gt_mask is None:
        raise DataError(f"case {case.case_id} has no ground truth mask")
    f = predict_field(store, cfg.unet, case.image)
    predicted = rasterize_projected_mask(atlas.mask, f)
    d = dice(predicted, case.gt_mask, case.exclusion_mask)
    projected = project_surface(atlas.surface, f)
    gt_surface = marching_cubes_surface(case.gt_mask)
    h = hd95(projected, gt_surface, case.exclusion_mask,
             sample_spacing_mm=0.5 * min(case.image.spacing))
    return MetricsRecord(case.case_id, seed, method, d, h)


def optimize_field_direct(target, atlas: AtlasBundle, cfg: TrainConfig,
                          iters: int | None = None) -> DeformationField:
    """Adam directly on a per-voxel displacement array under the variant loss.

    Returns the field achieving the best loss seen.
    """
    dims = target.dims
    if dims != atlas.image.dims:
        raise DataError(f"target grid {dims} != atlas grid {atlas.image.dims}")
    iters = cfg.direct_iters if iters is None else iters

    store = ParamStore()
    store.add("disp", np.zeros((3, *dims)))
    g = Graph()
    disp = g.param(store, "disp")
    vol = g.const(target.data.reshape(1, *dims))
    warped = g.grid_sample(vol, disp)
    weight_map = atlas.weights.volume.data if atlas.weights is not None else None
    total, _terms = attach_variant_loss(
        g, warped, disp, atlas.image.data, atlas.mask.data,
        weight_map, cfg.weights, cfg.variant)

    opt = Adam(store, cfg.direct_lr, cfg.beta1, cfg.beta2, cfg.eps)
    best = np.inf
    best_disp = store.blocks["disp"].copy()
    for _ in range(iters):
        g.forward()
        loss = float(total.value)
        if not np.isfinite(loss):
            raise NumericalError(f"direct field optimization diverged (loss {loss})")
        if loss < best:
            best = loss
            best_disp = store.blocks["disp"].copy()
        g.backward(total)
        opt.step({"disp": disp.grad})
    g.forward()
    final = float(total.value)
    if np.isfinite(final) and final < best:
        best_disp = store.blocks["disp"].copy()
    return DeformationField(best_disp, target.spacing)


@dataclass
class TrialsOutcome:
    results: list[TrialResult]
    aborted: list[dict]
    records: list[MetricsRecord]
    summary: dict


def run_trials(dataset: LoadedDataset, atlas: AtlasBundle, cfg: TrainConfig,
               method: str | None = None, out_dir=None, workers: int = 1) -> TrialsOutcome:
    """Train once per seed, evaluate the test split, aggregate by median.

    Aborted trials are recorded and excluded from aggregation with a warning
    entry in the summary.
    """
    method = method or cfg.variant
    results: list[TrialResult] = []
    aborted: list[dict] = []

    def one_trial(seed: int) -> TrialResult:
        log_path = None
        if out_dir is not None:
            trial_dir = out_dir / f"trial_seed{seed}"
            trial_dir.mkdir(parents=True, exist_ok=True)
            log_path = trial_dir / "train_log.jsonl"
        return train(dataset, atlas, cfg, seed, log_path=log_path)

    if workers > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {s: pool.submit(_trial_worker, dataset, atlas, cfg, s, out_dir)
                       for s in cfg.seeds}
            outcomes = {s: f.result() for s, f in futures.items()}
        for s in cfg.seeds:
            kind, payload = outcomes[s]
            if kind == "ok":
                results.append(payload)
            else:
                aborted.append({"seed": s, "error": payload})
    else:
        for s in cfg.seeds:
            try:
                results.append(one_trial(s))
            except NumericalError as exc:
                aborted.append({"seed": s, "error": str(exc)})

    records: list[MetricsRecord] = []
    for r in results:
        store = store_from_checkpoint(r.checkpoint)
        for case in dataset.test:
            records.append(evaluate_case(store, cfg, atlas, case, r.seed, method))

    summary = summarize_records(records, method)
    summary["trials_completed"] = len(results)
    summary["trials_configured"] = len(cfg.seeds)
    if aborted:
        summary["warning"] = f"aggregated over {len(results)} of {len(cfg.seeds)} trials"
        summary["aborted"] = aborted
    return TrialsOutcome(results, aborted, records, summary)


def _trial_worker(dataset, atlas, cfg, seed, out_dir):
    try:
        log_path = None
        if out_dir is not None:
            trial_dir = out_dir / f"trial_seed{seed}"
            trial_dir.mkdir(parents=True, exist_ok=True)
            log_path = trial_dir / "train_log.jsonl"
        return "ok", train(dataset, atlas, cfg, seed, log_path=log_path)
    except NumericalError as exc:
        return "aborted", str(exc)
