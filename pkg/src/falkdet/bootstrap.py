"""Approximated hard negative mining ("Mini Bootstrap") and one-vs-all training.

For one class, the negative pool is randomly subsampled and cut into ``n_B``
mini-batches of ``B`` regions.  At iteration ``i`` the previous model scores
batch ``i``; negatives scoring above ``tau_hard`` are the new hard ones.  A
fresh model is trained on the fixed positives plus the negatives kept so far
plus the new hard ones, then the negatives it was trained on are rescored and
those below ``tau_easy`` are pruned.  After the last batch a final model is
trained on the positives and the surviving negatives.

``n_B = 0`` degenerates to a single model trained on ``B`` random negatives
("Random BKG"); per-image batches with ``n_B`` equal to the number of images
reproduce the classic full bootstrap.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .bbox import DEFAULT_RIDGE, RlsModel, load_rls, rls_train, save_rls, targets_array
from .errors import ConfigError, IngestionError, InputError, NumericalError
from .falkon import FalkonModel, SolverConfig, falkon_predict, falkon_train, load_model, save_model
from .kernels import GaussianKernelParams
from .regions import (DEFAULT_TAU_NEG, DEFAULT_TAU_POS, DetectionDataset, label_image,
                      split_images)
from .sampling import rebalanced_center_sampling, subsample_indices

logger = logging.getLogger(__name__)

# rng streams; every random draw is keyed by (seed, class_id, iteration, stream)
NEGATIVE_STREAM = 0
CENTER_STREAM = 1


@dataclass(frozen=True)
class BootstrapConfig:
    n_batches: int = 4
    batch_size: int = 500
    num_centers: int = 1000
    lam: float = 3e-4
    sigma: float = 8.0
    tau_hard: float = 0.0
    tau_easy: float = -1.0
    hard_cap: int | None = None          # None means batch_size
    batch_mode: str = "random"           # or "image": one batch per training image
    other_class_negatives: bool = True
    bbox_ridge: float = DEFAULT_RIDGE
    seed: int = 0
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.n_batches < 0:
            raise ConfigError("n_batches must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.num_centers < 1:
            raise ConfigError("num_centers must be >= 1")
        if not (self.lam > 0 and self.sigma > 0):
            raise ConfigError("lambda and sigma must be positive")
        if self.tau_easy > self.tau_hard:
            raise ConfigError("tau_easy must not exceed tau_hard")
        if self.hard_cap is not None and self.hard_cap < 0:
            raise ConfigError("hard_cap must be >= 0")
        if self.batch_mode not in ("random", "image"):
            raise ConfigError(f"batch_mode must be 'random' or 'image', got {self.batch_mode!r}")

    @property
    def kernel(self) -> GaussianKernelParams:
        return GaussianKernelParams(self.sigma)

    @property
    def effective_hard_cap(self) -> int:
        return self.batch_size if self.hard_cap is None else self.hard_cap

    def replace(self, **changes) -> "BootstrapConfig":
        return dataclasses.replace(self, **changes)


def training_rng(seed: int, class_id: int, iteration: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, class_id, iteration, stream]))


def assemble_training_set(positives: np.ndarray, negatives: np.ndarray):
    """Stack positives over negatives with +1 / -1 targets."""
    X = np.concatenate([positives, negatives]) if len(negatives) else np.asarray(positives)
    y = np.concatenate([np.ones(len(positives)), -np.ones(len(negatives))])
    return X, y


def fit_rebalanced(positives: np.ndarray, negatives: np.ndarray, config: BootstrapConfig,
                   rng) -> FalkonModel:
    """Train one model with class-rebalanced center sampling."""
    X, y = assemble_training_set(positives, negatives)
    sel = rebalanced_center_sampling(len(positives), len(negatives), config.num_centers, rng)
    centers = X[np.concatenate([sel.positive_indices, len(positives) + sel.negative_indices])]
    return falkon_train(X, y, centers, config.lam, config.kernel, config.solver)


@dataclass
class IterationRecord:
    iteration: int
    n_hard: int
    n_chosen: int
    n_train: int
    n_positive: int
    positive_digest: str
    train_seconds: float
    cg_iterations: int
    converged: bool
    final: bool = False


@dataclass
class BootstrapState:
    class_id: int
    iteration: int = 0
    model: FalkonModel | None = None
    chosen: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    n_positive: int = 0
    trace: list[IterationRecord] = field(default_factory=list)


def _digest(a: np.ndarray) -> str:
    return hashlib.sha1(np.ascontiguousarray(a).tobytes()).hexdigest()


def _make_batches(n_pool: int, config: BootstrapConfig, rng, groups) -> list[np.ndarray]:
    if config.batch_mode == "image":
        if groups is None:
            raise InputError("batch_mode='image' needs the image index of every pool region")
        groups = np.asarray(groups)
        batches = []
        for g in np.unique(groups)[:config.n_batches]:
            members = np.flatnonzero(groups == g)
            batches.append(members[subsample_indices(len(members), config.batch_size, rng)])
        return batches
    sample = subsample_indices(n_pool, config.n_batches * config.batch_size, rng)
    return [sample[i:i + config.batch_size] for i in range(0, len(sample), config.batch_size)]


def mini_bootstrap_train_class(positives, negative_pool, config: BootstrapConfig,
                               class_id: int = 0, pool_groups=None):
    """Train one binary classifier with approximated hard negative mining.

    Parameters
    ----------
    positives : (P, d) array
        Features of the class's positive regions; fixed for every iteration.
    negative_pool : (N, d) array
        Features of every candidate negative.
    config : BootstrapConfig
    class_id : int
        Only used to key the random streams.
    pool_groups : (N,) array, optional
        Image index of each pool region, required for ``batch_mode='image'``.

    Returns
    -------
    (FalkonModel, BootstrapState)
        The final model and the per-iteration trace; ``state.chosen`` holds
        pool indices of the negatives used by the final model.
    """
    positives = np.atleast_2d(np.asarray(positives))
    negative_pool = np.asarray(negative_pool).reshape(-1, positives.shape[1])
    if positives.shape[0] < 1:
        raise InputError(f"class {class_id}: no positive regions")
    P = positives.shape[0]
    state = BootstrapState(class_id=class_id, n_positive=P)
    neg_rng = training_rng(config.seed, class_id, 0, NEGATIVE_STREAM)

    def fit(neg_idx, iteration):
        try:
            t0 = time.perf_counter()
            model = fit_rebalanced(positives, negative_pool[neg_idx], config,
                                   training_rng(config.seed, class_id, iteration, CENTER_STREAM))
            return model, time.perf_counter() - t0, _digest(positives)
        except NumericalError as exc:
            raise NumericalError(f"class {class_id}, bootstrap iteration {iteration}: {exc}") from exc

    chosen = np.zeros(0, dtype=np.int64)
    if config.n_batches == 0:
        chosen = subsample_indices(len(negative_pool), config.batch_size, neg_rng)
    else:
        model = None
        for i, batch in enumerate(_make_batches(len(negative_pool), config, neg_rng, pool_groups), 1):
            if model is None:
                hard = batch
            else:
                scores = falkon_predict(model, negative_pool[batch], config.solver.tile_rows)
                keep = np.flatnonzero(scores > config.tau_hard)
                keep = keep[np.argsort(-scores[keep], kind="stable")][:config.effective_hard_cap]
                hard = batch[keep]
            train_idx = np.concatenate([chosen, hard]).astype(np.int64)
            model, seconds, pos_digest = fit(train_idx, i)
            scores = falkon_predict(model, negative_pool[train_idx], config.solver.tile_rows)
            prev = len(chosen)
            chosen = train_idx[scores >= config.tau_easy]
            state.trace.append(IterationRecord(
                iteration=i, n_hard=len(hard), n_chosen=len(chosen), n_train=P + prev + len(hard),
                n_positive=P, positive_digest=pos_digest, train_seconds=seconds,
                cg_iterations=model.meta.iterations, converged=model.meta.converged))
            state.iteration, state.model = i, model
            logger.debug("class %d iteration %d: %d hard, %d kept", class_id, i, len(hard), len(chosen))

    final_iter = len(state.trace) + 1
    model, seconds, pos_digest = fit(chosen, final_iter)
    state.trace.append(IterationRecord(
        iteration=final_iter, n_hard=0, n_chosen=len(chosen), n_train=P + len(chosen),
        n_positive=P, positive_digest=pos_digest, train_seconds=seconds,
        cg_iterations=model.meta.iterations, converged=model.meta.converged, final=True))
    state.iteration, state.model, state.chosen = final_iter, model, chosen
    return model, state


# -- one-vs-all ensemble ---------------------------------------------------------

@dataclass(eq=False)
class LabeledRegions:
    """All retained regions of a dataset, flattened across images."""
    rows: np.ndarray
    boxes: np.ndarray
    labels: np.ndarray
    gt_boxes: np.ndarray      # matched ground truth box, NaN for negatives
    image_index: np.ndarray


def label_dataset(dataset: DetectionDataset, tau_pos: float = DEFAULT_TAU_POS,
                  tau_neg: float = DEFAULT_TAU_NEG) -> LabeledRegions:
    parts = []
    for k, im in enumerate(dataset.images):
        lab = label_image(im, tau_pos, tau_neg)
        gt = np.full((len(lab.rows), 4), np.nan)
        pos = lab.matched >= 0
        gt[pos] = im.gt_boxes[lab.matched[pos]]
        parts.append((lab.rows, lab.boxes, lab.labels, gt, np.full(len(lab.rows), k)))
    if not parts:
        return LabeledRegions(np.zeros(0, np.int64), np.zeros((0, 4)), np.zeros(0, np.int64),
                              np.zeros((0, 4)), np.zeros(0, np.int64))
    return LabeledRegions(*(np.concatenate(p) for p in zip(*parts)))


@dataclass(eq=False)
class ClassifierEnsemble:
    class_names: list[str]
    models: list[FalkonModel | None]
    regressors: list[RlsModel | None]
    tau_pos: float = DEFAULT_TAU_POS
    tau_neg: float = DEFAULT_TAU_NEG
    config: BootstrapConfig = BootstrapConfig()
    states: list[BootstrapState | None] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)
    train_seconds: float = 0.0

    def __post_init__(self):
        if not (len(self.models) == len(self.regressors) == len(self.class_names)):
            raise InputError("ensemble needs exactly one classifier and regressor slot per class")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int | None:
        for m in self.models:
            if m is not None:
                return m.dim
        return None


def _train_one_class(c: int, features: np.ndarray, regions: LabeledRegions,
                     config: BootstrapConfig):
    pos_mask = regions.labels == c
    if not pos_mask.any():
        raise InputError(f"class {c} has no positive training regions")
    neg_mask = regions.labels == -1
    if config.other_class_negatives:
        neg_mask |= (regions.labels >= 0) & ~pos_mask
    positives = features[regions.rows[pos_mask]]
    pool = features[regions.rows[neg_mask]]
    model, state = mini_bootstrap_train_class(positives, pool, config, class_id=c,
                                              pool_groups=regions.image_index[neg_mask])
    targets = targets_array(regions.boxes[pos_mask], regions.gt_boxes[pos_mask])
    regressor = rls_train(positives, targets, config.bbox_ridge)
    return model, regressor, state


def train_ensemble(dataset: DetectionDataset, config: BootstrapConfig = BootstrapConfig(),
                   tau_pos: float = DEFAULT_TAU_POS, tau_neg: float = DEFAULT_TAU_NEG,
                   threads: int = 1) -> ClassifierEnsemble:
    """Train one classifier and one box regressor per class.

    A class without positives does not abort training: its slot stays
    ``None`` and the reason is stored in ``ensemble.errors``.
    """
    t0 = time.perf_counter()
    regions = label_dataset(dataset, tau_pos, tau_neg)
    C = dataset.num_classes
    models: list = [None] * C
    regressors: list = [None] * C
    states: list = [None] * C
    errors: dict[int, str] = {}

    def run(c):
        try:
            return c, _train_one_class(c, dataset.features, regions, config), None
        except InputError as exc:
            return c, None, f"{dataset.class_names[c]}: {exc}"

    if threads > 1 and C > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(C)))
    else:
        results = [run(c) for c in range(C)]
    for c, out, err in results:
        if err is not None:
            logger.warning("skipping class %s", err)
            errors[c] = err
        else:
            models[c], regressors[c], states[c] = out
    return ClassifierEnsemble(list(dataset.class_names), models, regressors, tau_pos, tau_neg,
                              config, states, errors, time.perf_counter() - t0)


# -- hyperparameter selection ----------------------------------------------------

@dataclass
class CrossValidationResult:
    lam: float
    sigma: float
    table: list[tuple[float, float, float]]   # (lambda, sigma, validation mAP)


def cross_validate(dataset: DetectionDataset, lambda_grid: Sequence[float],
                   sigma_grid: Sequence[float], config: BootstrapConfig = BootstrapConfig(),
                   tau_pos: float = DEFAULT_TAU_POS, tau_neg: float = DEFAULT_TAU_NEG,
                   validation_fraction: float = 0.2, score_thresh: float = 0.0,
                   nms_iou: float = 0.3, match_iou: float = 0.5,
                   threads: int = 1) -> CrossValidationResult:
    """One-fold cross-validation of ``(lambda, sigma)`` on a by-image split.

    The pair with the highest validation mAP wins; ties go to the smaller
    lambda, then the smaller sigma.
    """
    from .evaluation import detect, evaluate_map

    if not lambda_grid or not sigma_grid:
        raise InputError("lambda and sigma grids must be nonempty")
    train_idx, val_idx = split_images(len(dataset.images), validation_fraction, config.seed)
    train = dataset.subset(train_idx, "train")
    val = dataset.subset(val_idx, "val")
    cache: dict[tuple[float, float], float] = {}
    table = []
    for lam in lambda_grid:
        for sigma in sigma_grid:
            key = (float(lam), float(sigma))
            if key not in cache:
                ens = train_ensemble(train, config.replace(lam=key[0], sigma=key[1]),
                                     tau_pos, tau_neg, threads)
                dets = detect(ens, val, score_thresh, nms_iou)
                cache[key] = evaluate_map(dets, val, match_iou).mAP
                logger.info("lambda=%g sigma=%g validation mAP=%.4f", *key, cache[key])
            table.append((key[0], key[1], cache[key]))
    best = min(cache, key=lambda k: (-cache[k], k[0], k[1]))
    return CrossValidationResult(best[0], best[1], table)


# -- persistence -------------------------------------------------------------------

MANIFEST = "ensemble.txt"


def _check_name(name: str) -> str:
    if not name or any(not (ch.isalnum() or ch in "-_.") for ch in name) or name.startswith("."):
        raise InputError(f"class name {name!r} is not usable in a file name")
    return name


def _config_items(config: BootstrapConfig) -> list[tuple[str, str]]:
    items = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if f.name == "solver":
            for sf in dataclasses.fields(value):
                items.append((f"solver.{sf.name}", repr(getattr(value, sf.name))))
        else:
            items.append((f.name, repr(value)))
    return items


def _parse_value(text: str, default):
    if text == "None":
        return None
    if isinstance(default, bool):
        return text == "True"
    if isinstance(default, int) or (default is None and text.lstrip("-").isdigit()):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip("'\"")


def config_from_items(items: dict[str, str]) -> BootstrapConfig:
    base = BootstrapConfig()
    kwargs, solver = {}, {}
    for key, text in items.items():
        if key.startswith("solver."):
            name = key[len("solver."):]
            solver[name] = _parse_value(text, getattr(base.solver, name))
        elif key in {f.name for f in dataclasses.fields(base)}:
            kwargs[key] = _parse_value(text, getattr(base, key))
    return BootstrapConfig(**kwargs, solver=SolverConfig(**solver))


def save_ensemble(ensemble: ClassifierEnsemble, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = [_check_name(n) for n in ensemble.class_names]
    trained = [n for n, m in zip(names, ensemble.models) if m is not None]
    lines = [f"classes={','.join(names)}", f"trained={','.join(trained)}",
             f"tau_pos={ensemble.tau_pos!r}", f"tau_neg={ensemble.tau_neg!r}"]
    lines += [f"config.{k}={v}" for k, v in _config_items(ensemble.config)]
    (directory / MANIFEST).write_text("\n".join(lines) + "\n", encoding="utf-8")
    for name, model, reg in zip(names, ensemble.models, ensemble.regressors):
        if model is not None:
            save_model(model, directory / f"falkon_{name}.bin")
            save_rls(reg, directory / f"bbox_{name}.bin")


def load_ensemble(directory) -> ClassifierEnsemble:
    directory = Path(directory)
    path = directory / MANIFEST
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"{path}: cannot read ensemble manifest ({exc.strerror})") from exc
    items = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if "=" not in line:
            raise IngestionError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        items[k] = v
    for key in ("classes", "trained", "tau_pos", "tau_neg"):
        if key not in items:
            raise IngestionError(f"{path}: missing '{key}'")
    names = items["classes"].split(",") if items["classes"] else []
    trained = set(items["trained"].split(",")) if items["trained"] else set()
    config = config_from_items({k[len("config."):]: v for k, v in items.items()
                                if k.startswith("config.")})
    models, regs = [], []
    for name in names:
        if name in trained:
            models.append(load_model(directory / f"falkon_{name}.bin"))
            regs.append(load_rls(directory / f"bbox_{name}.bin"))
        else:
            models.append(None)
            regs.append(None)
    return ClassifierEnsemble(names, models, regs, float(items["tau_pos"]), float(items["tau_neg"]),
                              config, [None] * len(names))


def write_trace(state: BootstrapState, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "n_hard", "n_chosen", "train_seconds"])
        for rec in state.trace:
            w.writerow([rec.iteration, rec.n_hard, rec.n_chosen, f"{rec.train_seconds:.3f}"])


def write_traces(ensemble: ClassifierEnsemble, directory) -> list[Path]:
    directory = Path(directory)
    paths = []
    for name, state in zip(ensemble.class_names, ensemble.states):
        if state is not None:
            path = directory / f"trace_{_check_name(name)}.csv"
            write_trace(state, path)
            paths.append(path)
    return paths


def negatives_consumed(config: BootstrapConfig) -> int:
    """Upper bound on the negatives a configuration looks at."""
    return config.batch_size * max(1, config.n_batches)
