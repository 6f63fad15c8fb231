"""Leave-one-subject-out evaluation, metrics and the ablation harness.

The harness works on a :class:`Corpus` of raw pulse matrices.  Each ablation
cell is an :class:`ExperimentConfig`; the cell decides which domain maps are
built, how the ViT input is adapted, which fusion design is used and how many
held-out-subject shots are spent on adaptation.
"""
from __future__ import annotations

import dataclasses
import hashlib
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import domainmaps as dm
from . import nn
from . import uwbsim
from .adapt import IMAGE_SIDE, STRATEGIES, InputAdapter
from .model import BranchSpec, DarModel, EncoderConfig, ModelSpec, PretrainedBundle, build_model, encoder_macs
from .resample import resize_bilinear
from .training import TrainConfig, few_shot_adapt, train

__all__ = [
    "LABELS",
    "DRIVE",
    "BINARY_MAPPING",
    "SplitError",
    "Fold",
    "SplitPlan",
    "make_loso_splits",
    "with_shots",
    "EvalReport",
    "score",
    "config_fingerprint",
    "Corpus",
    "synthetic_corpus",
    "ExperimentConfig",
    "AXES",
    "cell_issue",
    "prepare_inputs",
    "default_factory",
    "TrainCache",
    "run_cell",
    "run_ablation",
    "trend_statistic",
    "FusionCost",
    "compare_fusion_cost",
    "format_table",
]

log = logging.getLogger(__name__)

LABELS = uwbsim.LABELS
DRIVE = LABELS.index("Drive")
BINARY_MAPPING = "non-distracted = {Drive}; distracted = every other label, Relax included"


# ---------------------------------------------------------------------------
# splits


class SplitError(ValueError):
    """A split violates subject or sample hygiene."""


@dataclass(frozen=True)
class Fold:
    held_out: int
    train_ids: tuple[str, ...]
    test_ids: tuple[str, ...]
    shot_ids: tuple[str, ...] = ()

    def check(self, subject_of: Mapping[str, int]) -> None:
        """Raise :class:`SplitError` unless the fold is leak-free."""
        train, test, shots = set(self.train_ids), set(self.test_ids), set(self.shot_ids)
        for name, ids, group in (("train", self.train_ids, train), ("test", self.test_ids, test),
                                 ("shot", self.shot_ids, shots)):
            if len(group) != len(ids):
                raise SplitError(f"fold {self.held_out}: duplicate ids in {name} set")
            unknown = [i for i in ids if i not in subject_of]
            if unknown:
                raise SplitError(f"fold {self.held_out}: unknown {name} ids {unknown[:3]}")
        if train & test:
            raise SplitError(f"fold {self.held_out}: {len(train & test)} samples in both train and test")
        if shots & test:
            raise SplitError(f"fold {self.held_out}: {len(shots & test)} shot samples left in test")
        if shots & train:
            raise SplitError(f"fold {self.held_out}: {len(shots & train)} shot samples in train")
        train_subjects = {subject_of[i] for i in train}
        if self.held_out in train_subjects:
            raise SplitError(f"fold {self.held_out}: held-out subject appears in train")
        for name, group in (("test", test), ("shot", shots)):
            other = {subject_of[i] for i in group} - {self.held_out}
            if other:
                raise SplitError(f"fold {self.held_out}: {name} set holds samples of subjects {sorted(other)}")


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    subject_of: Mapping[str, int] = field(repr=False, default_factory=dict)

    def fold(self, subject: int) -> Fold:
        for f in self.folds:
            if f.held_out == subject:
                return f
        raise KeyError(f"no fold holds out subject {subject}")

    @property
    def subjects(self) -> tuple[int, ...]:
        return tuple(f.held_out for f in self.folds)

    def check(self) -> None:
        for f in self.folds:
            f.check(self.subject_of)


def make_loso_splits(sample_ids: Sequence[str], subject_ids: Sequence[int], reserved: Iterable[str] = ()) -> SplitPlan:
    """One fold per subject: that subject's samples form the test set, the rest train.

    ``reserved`` ids (few-shot pools) belong to their subject but are kept out
    of both train and test; :func:`with_shots` draws from them.
    """
    sample_ids = [str(s) for s in sample_ids]
    subject_ids = [int(s) for s in subject_ids]
    if len(sample_ids) != len(subject_ids):
        raise ValueError(f"{len(sample_ids)} sample ids but {len(subject_ids)} subject ids")
    seen: dict[str, int] = {}
    for sid, sub in zip(sample_ids, subject_ids):
        if sid in seen:
            where = "across subjects" if seen[sid] != sub else "within a subject"
            raise SplitError(f"duplicate sample id {sid!r} ({where} {seen[sid]} and {sub})")
        seen[sid] = sub
    subjects = sorted(set(subject_ids))
    if len(subjects) < 2:
        raise SplitError(f"leave-one-subject-out needs at least 2 subjects, got {len(subjects)}")
    reserved = set(reserved)
    missing = reserved - set(seen)
    if missing:
        raise SplitError(f"reserved ids not in the sample list: {sorted(missing)[:3]}")
    folds = []
    for s in subjects:
        train = tuple(i for i, u in zip(sample_ids, subject_ids) if u != s and i not in reserved)
        test = tuple(i for i, u in zip(sample_ids, subject_ids) if u == s and i not in reserved)
        folds.append(Fold(s, train, test))
    plan = SplitPlan(tuple(folds), dict(seen))
    plan.check()
    return plan


def with_shots(fold: Fold, shot_ids: Sequence[str], subject_of: Mapping[str, int]) -> Fold:
    """Attach few-shot samples to ``fold``; they are removed from its test set.

    Shots must come from the held-out subject and never from the training set.
    """
    shot_ids = tuple(str(s) for s in shot_ids)
    bad = [s for s in shot_ids if subject_of.get(s) != fold.held_out]
    if bad:
        raise SplitError(f"fold {fold.held_out}: shots {bad[:3]} are not from the held-out subject")
    shots = set(shot_ids)
    out = Fold(fold.held_out, fold.train_ids, tuple(i for i in fold.test_ids if i not in shots), shot_ids)
    out.check(subject_of)
    return out


# ---------------------------------------------------------------------------
# metrics


def config_fingerprint(cfg: Mapping) -> str:
    """Stable short hash of a JSON-serializable configuration."""
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EvalReport:
    confusion: np.ndarray  # rows = true class, columns = predicted
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    zero_precision: tuple[int, ...]  # classes never predicted (precision reported as 0)
    accuracy: float
    binary_distracted_accuracy: float
    fingerprint: str = ""
    seed: int | None = None
    labels: tuple[str, ...] = LABELS
    extras: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "zero_precision": list(self.zero_precision),
            "accuracy": self.accuracy,
            "binary_distracted_accuracy": self.binary_distracted_accuracy,
            "binary_mapping": BINARY_MAPPING,
            "fingerprint": self.fingerprint,
            "seed": self.seed,
            "labels": list(self.labels),
            "extras": self.extras,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            confusion=np.asarray(d["confusion"], dtype=np.int64),
            precision=np.asarray(d["precision"], dtype=np.float64),
            recall=np.asarray(d["recall"], dtype=np.float64),
            f1=np.asarray(d["f1"], dtype=np.float64),
            zero_precision=tuple(d["zero_precision"]),
            accuracy=float(d["accuracy"]),
            binary_distracted_accuracy=float(d["binary_distracted_accuracy"]),
            fingerprint=d.get("fingerprint", ""),
            seed=d.get("seed"),
            labels=tuple(d.get("labels", LABELS)),
            extras=dict(d.get("extras", {})),
        )

    def confusion_text(self) -> str:
        width = max(len(str(self.confusion.max(initial=0))), max(len(l) for l in self.labels))
        head = " " * (width + 1) + " ".join(l.rjust(width) for l in self.labels)
        rows = [l.rjust(width) + " " + " ".join(str(v).rjust(width) for v in row)
                for l, row in zip(self.labels, self.confusion)]
        return "\n".join([head, *rows]) + "\n"


def score(predictions, labels, n_classes: int | None = None, class_names: Sequence[str] | None = None,
          drive: int = DRIVE, fingerprint: str = "", seed: int | None = None, extras: dict | None = None) -> EvalReport:
    """Confusion matrix, per-class P/R/F1, accuracy and the Drive-vs-rest accuracy."""
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if pred.shape != true.shape:
        raise ValueError(f"{pred.size} predictions for {true.size} labels")
    if class_names is None:
        class_names = LABELS if n_classes in (None, len(LABELS)) else tuple(str(i) for i in range(n_classes))
    c = len(class_names) if n_classes is None else int(n_classes)
    if len(class_names) != c:
        raise ValueError(f"{len(class_names)} class names for {c} classes")
    if pred.size and (min(pred.min(), true.min()) < 0 or max(pred.max(), true.max()) >= c):
        raise ValueError(f"class codes must lie in [0, {c})")
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    tp = np.diag(conf).astype(np.float64)
    col = conf.sum(axis=0).astype(np.float64)
    row = conf.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, col, out=np.zeros(c), where=col > 0)
    recall = np.divide(tp, row, out=np.zeros(c), where=row > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros(c), where=denom > 0)
    n = pred.size
    acc = float(tp.sum() / n) if n else 0.0
    bin_acc = float(((pred == drive) == (true == drive)).mean()) if n else 0.0
    return EvalReport(conf, precision, recall, f1, tuple(int(i) for i in np.flatnonzero(col == 0)), acc, bin_acc,
                      fingerprint, seed, tuple(class_names), dict(extras or {}))


# ---------------------------------------------------------------------------
# data


@dataclass
class Corpus:
    """Raw recordings plus the ids reserved as few-shot pools.

    ``recipe`` holds the simulator arguments when the corpus is synthetic so
    that longer observation windows can be regenerated.
    """

    pulses: list
    reserved: frozenset = frozenset()
    recipe: dict | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.reserved = frozenset(self.reserved)
        if self.pulses:
            rates = {p.frame_rate for p in self.pulses}
            frames = {p.slow_bins for p in self.pulses}
            if len(rates) != 1 or len(frames) != 1:
                raise ValueError("all recordings of a corpus need the same frame rate and length")

    def __len__(self):
        return len(self.pulses)

    @property
    def sample_ids(self) -> list[str]:
        return [p.sample_id for p in self.pulses]

    @property
    def labels(self) -> np.ndarray:
        return np.array([p.label_code for p in self.pulses], dtype=np.int64)

    @property
    def subjects(self) -> np.ndarray:
        return np.array([p.subject_id for p in self.pulses], dtype=np.int64)

    @property
    def frame_rate(self) -> float:
        return self.pulses[0].frame_rate

    @property
    def window_s(self) -> float:
        return self.pulses[0].slow_bins / self.frame_rate

    def index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.sample_ids)}

    def for_window(self, seconds: float) -> "Corpus":
        """Recordings of ``seconds`` length: leading slice if shorter, regenerated if longer."""
        frames = int(round(seconds * self.frame_rate))
        have = self.pulses[0].slow_bins
        if frames == have:
            return self
        key = ("window", frames)
        if key in self._cache:
            return self._cache[key]
        if frames < have:
            # leading slice; ids stay the same across windows
            out = Corpus([dataclasses.replace(p, data=p.data[:, :frames].copy()) for p in self.pulses],
                         self.reserved, self.recipe)
        elif self.recipe is not None:
            out = synthetic_corpus(**{**self.recipe, "window_s": seconds})
        else:
            raise ValueError(f"recordings are {have} frames long; cannot build {frames}-frame windows")
        self._cache[key] = out
        return out

    def maps(self, kind: str, crop: str = "ROI", band: str = "higher") -> np.ndarray:
        """Stacked float32 maps ``(N, H, W)`` of one kind; cached."""
        key = (kind, crop, band)
        if key not in self._cache:
            self._cache[key] = np.stack([_map(p, kind, crop, band) for p in self.pulses]).astype(np.float32)
        return self._cache[key]


def _range_rows(crop, n):
    if crop == "full":
        return 0, n
    if crop == "ROI":
        lo, hi = dm.ALERT_RANGE_ROI
        if hi > n:
            raise ValueError(f"ROI rows {lo}:{hi} exceed {n} range bins")
        return lo, hi
    raise ValueError(f"crop must be full or ROI, got {crop!r}")


def _map(p, kind, crop, band):
    if kind == "range":
        lo, hi = _range_rows(crop, p.fast_bins)
        return dm.range_map(p).data[lo:hi]
    if kind == "range-doppler":
        lo, hi = _range_rows(crop, p.fast_bins)
        return dm.range_doppler_map(p).data[lo:hi]
    if kind == "freq":
        f = dm.frequency_map(p).data
        lo, hi = dm.band_rows(band, f.shape[0])
        return f[lo:hi]
    raise ValueError(f"unknown map kind {kind!r}")


def synthetic_corpus(n_subjects: int = 6, per_class: int = 6, shot_pool: int = 30, shot_labels=("Relax",),
                     window_s: float = 5.0, seed: int = 0, library: Mapping | None = None,
                     dtype: str = "float32") -> Corpus:
    """Simulated recordings: ``per_class`` windows per (subject, activity).

    Every subject also gets ``shot_pool`` extra windows of each of
    ``shot_labels``; they are reserved for few-shot adaptation.
    """
    recipe = dict(n_subjects=n_subjects, per_class=per_class, shot_pool=shot_pool, shot_labels=tuple(shot_labels),
                  window_s=window_s, seed=seed, library=dict(library or {}), dtype=dtype)
    params = uwbsim.LibraryParams().with_(**recipe["library"])
    archs = uwbsim.default_archetypes(params)
    subjects = uwbsim.make_subjects(n_subjects, seed=seed)
    geom = uwbsim.Geometry(slow_bins=int(round(window_s * params.frame_rate)), frame_rate=params.frame_rate)
    unknown = set(shot_labels) - set(LABELS)
    if unknown:
        raise ValueError(f"unknown shot labels {sorted(unknown)}")
    pulses, reserved = [], set()
    for sub in subjects:
        for arch in archs:
            extra = shot_pool if arch.label in shot_labels else 0
            got = uwbsim.generate_dataset([arch], [sub], per_class + extra, geometry=geom, dtype=np.dtype(dtype))
            pulses += got
            reserved.update(p.sample_id for p in got[per_class:])
    return Corpus(pulses, frozenset(reserved), recipe)


# ---------------------------------------------------------------------------
# experiment cells

AXES: dict[str, tuple] = {
    "window": (1, 2, 5, 10),
    "crop": ("full", "ROI"),
    "band": ("lower", "higher", "full"),
    "shots": (0, 5, 10, 20, 30),
    "domain": ("range", "freq", "fusion", "range-doppler"),
    "adapt": STRATEGIES,
    "fusion": ("early", "late"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that determines one run; ablation cells override fields."""

    window: float = 5
    crop: str = "ROI"
    band: str = "higher"
    shots: int = 0
    domain: str = "fusion"
    adapt: str = "isa"
    # None: ViT on the range map + lightweight extractor on the frequency map;
    # "late": two ViTs; "early": one ViT on a two-channel image
    fusion: str | None = None
    beta_trainable: bool = True
    epochs: int = 30
    lr: float = 1e-4
    batch: int = 25
    adapt_epochs: int = 10
    adapt_batch: int = 5
    adapt_lr: float | None = None  # None: same as lr
    fresh_lr_scale: float = 10.0
    seeds: tuple[int, ...] = (0, 1, 2)
    # held-out subjects per seed; seed i takes the i-th group of subjects, so
    # three seeds with 2 folds each cover six subjects once
    folds_per_seed: int | None = 2
    dtype: str = "float32"

    def __post_init__(self):
        if self.crop not in AXES["crop"]:
            raise ValueError(f"crop must be one of {AXES['crop']}")
        if self.band not in AXES["band"]:
            raise ValueError(f"band must be one of {AXES['band']}")
        if self.domain not in AXES["domain"]:
            raise ValueError(f"domain must be one of {AXES['domain']}")
        if self.adapt not in STRATEGIES:
            raise ValueError(f"adapt must be one of {STRATEGIES}")
        if self.fusion not in (None, *AXES["fusion"]):
            raise ValueError(f"fusion must be early, late or None, got {self.fusion!r}")
        if self.shots < 0 or self.window <= 0:
            raise ValueError("shots must be >= 0 and window > 0")
        if self.folds_per_seed is not None and self.folds_per_seed < 1:
            raise ValueError("folds_per_seed must be >= 1 or None")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def replace(self, **kw) -> "ExperimentConfig":
        return dataclasses.replace(self, **kw)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown experiment keys {sorted(unknown)}")
        d = dict(d)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        return cls(**d)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, epochs=self.epochs, batch=self.batch, adapt_epochs=self.adapt_epochs,
                           adapt_batch=self.adapt_batch, adapt_lr=self.adapt_lr, fresh_lr_scale=self.fresh_lr_scale)


def cell_issue(cell: Mapping, explicit: Iterable[str] = ()) -> str | None:
    """Why a cell is meaningless, or ``None``.  Only ``explicit`` axes are judged."""
    explicit = set(explicit)
    domain = cell.get("domain", "fusion")
    fusion = cell.get("fusion")
    if "band" in explicit and domain in ("range", "range-doppler"):
        return f"band has no effect on a {domain}-only run"
    if "crop" in explicit and domain == "freq":
        return "crop has no effect on a frequency-only run"
    if "fusion" in explicit and domain != "fusion":
        return f"fusion design has no effect on a {domain}-only run"
    if "adapt" in explicit and domain == "fusion" and fusion == "early" and cell.get("adapt") != "simple":
        return "the early-fusion baseline always uses simple resizing"
    return None


def _branch_sources(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    """(kind, source) per branch."""
    if cfg.domain == "fusion":
        if cfg.fusion == "early":
            return [("vit", "early")]
        if cfg.fusion == "late":
            return [("vit", "range"), ("vit", "freq")]
        return [("vit", "range"), ("light", "freq")]
    return [("vit", cfg.domain)]


def _early_image(r, f):
    side = (IMAGE_SIDE, IMAGE_SIDE)
    return np.stack([resize_bilinear(r, side), resize_bilinear(f, side)], axis=1)


def prepare_inputs(corpus: Corpus, cfg: ExperimentConfig, idx=None):
    """Model inputs for the samples ``idx`` (all by default) and the branch specs.

    ViT branches receive patch matrices from their input adapter; the light
    branch receives the map itself.
    """
    corpus = corpus.for_window(cfg.window)
    sel = slice(None) if idx is None else np.asarray(idx)
    dtype = np.dtype(cfg.dtype)
    inputs, branches = [], []
    for kind, source in _branch_sources(cfg):
        if source == "early":
            r = corpus.maps("range", cfg.crop, cfg.band)[sel]
            f = corpus.maps("freq", cfg.crop, cfg.band)[sel]
            ad = InputAdapter("simple", (IMAGE_SIDE, IMAGE_SIDE), channels=2)
            x = ad.patches(_early_image(r, f)).astype(dtype)
            branches.append(BranchSpec("vit", source, ad))
        else:
            maps = corpus.maps(source, cfg.crop, cfg.band)[sel]
            if kind == "vit":
                ad = InputAdapter(cfg.adapt, maps.shape[1:])
                x = ad.patches(maps).astype(dtype)
                branches.append(BranchSpec("vit", source, ad))
            else:
                x = maps.astype(dtype)
                branches.append(BranchSpec("light", source, input_shape=maps.shape[1:]))
        inputs.append(x)
    return inputs, tuple(branches)


def default_factory(bundle: PretrainedBundle) -> Callable:
    """``factory(cfg, branches, seed) -> DarModel`` initialized from ``bundle``."""

    def factory(cfg: ExperimentConfig, branches, seed: int) -> DarModel:
        spec = ModelSpec(branches, encoder=bundle.config, n_classes=len(LABELS), beta_trainable=cfg.beta_trainable)
        return build_model(spec, bundle, seed=seed, dtype=np.dtype(cfg.dtype))

    return factory


class TrainCache(dict):
    """Trained base models keyed by (config without shots, seed, fold).

    A few-shot sweep or several criteria sharing one configuration train
    each base model once.
    """

    @staticmethod
    def key(cfg: ExperimentConfig, seed: int, held_out: int, extra: str = "") -> str:
        d = cfg.to_dict()
        for k in ("shots", "adapt_epochs", "adapt_batch", "adapt_lr", "seeds", "folds_per_seed"):
            d.pop(k)
        return f"{config_fingerprint(d)}:{extra}:{seed}:{held_out}"


def _folds_for_seed(subjects: Sequence[int], seed_index: int, k: int | None) -> list[int]:
    if k is None:
        return list(subjects)
    n = len(subjects)
    return [subjects[(seed_index * k + j) % n] for j in range(min(k, n))]


def _shot_ids(corpus: Corpus, held_out: int, n: int, seed: int) -> list[str]:
    """First ``n`` of a label-interleaved ordering of the held-out subject's pool.

    Labels take turns, so any prefix is as balanced as the pool allows, and
    the shots for a smaller ``n`` are a subset of those for a larger one.
    """
    if n == 0:
        return []
    by_label: dict[str, list[str]] = {}
    for p in corpus.pulses:
        if p.subject_id == held_out and p.sample_id in corpus.reserved:
            by_label.setdefault(p.label, []).append(p.sample_id)
    total = sum(len(v) for v in by_label.values())
    if total < n:
        raise ValueError(f"subject {held_out} has {total} pool samples, {n} shots requested")
    rng = np.random.default_rng([seed, held_out, 7])
    queues = [[ids[i] for i in rng.permutation(len(ids))] for _, ids in sorted(by_label.items())]
    queues = [queues[i] for i in rng.permutation(len(queues))]
    order = [q[r] for r in range(max(map(len, queues))) for q in queues if r < len(q)]
    return order[:n]


def run_cell(corpus: Corpus, cfg: ExperimentConfig, factory: Callable, seed: int, seed_index: int = 0,
             cache: TrainCache | None = None, tag: str = "") -> tuple[np.ndarray, np.ndarray, dict]:
    """Train/adapt/predict over this seed's folds; returns pooled predictions, labels and info."""
    corpus = corpus.for_window(cfg.window)
    plan = make_loso_splits(corpus.sample_ids, corpus.subjects, corpus.reserved)
    pos = corpus.index()
    labels = corpus.labels
    tcfg = cfg.train_config()
    preds, trues, folds_info = [], [], []
    for held_out in _folds_for_seed(plan.subjects, seed_index, cfg.folds_per_seed):
        fold = with_shots(plan.fold(held_out), _shot_ids(corpus, held_out, cfg.shots, seed), plan.subject_of)
        tr = np.array([pos[i] for i in fold.train_ids])
        te = np.array([pos[i] for i in fold.test_ids])
        key = TrainCache.key(cfg, seed, held_out, tag)
        if cache is not None and key in cache:
            model = cache[key]
        else:
            x_tr, branches = prepare_inputs(corpus, cfg, tr)
            model, _ = train(factory(cfg, branches, seed), x_tr, labels[tr], tcfg, seed=seed)
            del x_tr
            if cache is not None:
                cache[key] = model
        if fold.shot_ids:
            sh = np.array([pos[i] for i in fold.shot_ids])
            x_sh, _ = prepare_inputs(corpus, cfg, sh)
            model, _ = few_shot_adapt(model, x_sh, labels[sh], tcfg, seed=seed)
        x_te, _ = prepare_inputs(corpus, cfg, te)
        p = model.predict(x_te)
        preds.append(p)
        trues.append(labels[te])
        folds_info.append({"held_out": int(held_out), "n_test": int(te.size), "n_shots": len(fold.shot_ids),
                           "accuracy": float((p == labels[te]).mean())})
        if "beta" in model.params:
            folds_info[-1]["beta"] = float(model.params["beta"][0])
    return np.concatenate(preds), np.concatenate(trues), {"folds": folds_info}


def trend_statistic(xs: Sequence[float], ys: Sequence[float]) -> dict:
    """Kendall tau of ``ys`` against ``xs`` and whether ``ys`` is non-decreasing in ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    order = np.argsort(xs, kind="stable")
    xs, ys = xs[order], ys[order]
    conc = disc = 0
    for i, j in itertools.combinations(range(xs.size), 2):
        s = np.sign(xs[j] - xs[i]) * np.sign(ys[j] - ys[i])
        conc += s > 0
        disc += s < 0
    pairs = xs.size * (xs.size - 1) / 2
    tau = float((conc - disc) / pairs) if pairs else 0.0
    return {"kendall_tau": tau, "non_decreasing": bool(np.all(np.diff(ys) >= 0)),
            "x": xs.tolist(), "y": ys.tolist()}


def _expand(grid: Mapping[str, Sequence]) -> list[dict]:
    for k in grid:
        if k not in AXES:
            raise ValueError(f"unknown ablation axis {k!r}; choose from {sorted(AXES)}")
    if not grid:
        return []
    keys = list(grid)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(list(grid[k]) for k in keys))]


def run_ablation(grid: Mapping[str, Sequence], corpus: Corpus, factory: Callable,
                 base: ExperimentConfig = ExperimentConfig(), report_path=None, cache: TrainCache | None = None,
                 provenance: str = "", notice: Callable[[str], None] | None = None) -> list[EvalReport]:
    """Cartesian sweep over ``grid``; one :class:`EvalReport` per valid cell.

    Each cell runs every seed of ``base.seeds``; predictions of all seeds and
    folds are pooled into one confusion matrix (equal test counts per seed, so
    the pooled accuracy is the seed mean) and per-seed accuracies are kept in
    ``extras``.  Reports are appended to ``report_path`` as JSON lines.  Grids
    over ``window`` or ``shots`` get a trend statistic attached.
    """
    notice = notice or (lambda msg: log.warning(msg))
    cache = TrainCache() if cache is None else cache
    reports = []
    for cell in _expand(grid):
        issue = cell_issue({**base.to_dict(), **cell}, grid.keys())
        if issue:
            notice(f"skipping cell {cell}: {issue}")
            continue
        try:
            cfg = base.replace(**cell)
        except ValueError as exc:
            notice(f"skipping cell {cell}: {exc}")
            continue
        t0 = time.perf_counter()
        preds, trues, seed_acc, infos = [], [], [], []
        try:
            for si, seed in enumerate(cfg.seeds):
                p, t, info = run_cell(corpus, cfg, factory, seed, si, cache)
                preds.append(p)
                trues.append(t)
                seed_acc.append(float((p == t).mean()))
                infos.append(info)
        except ValueError as exc:
            notice(f"skipping cell {cell}: {exc}")
            continue
        fp = config_fingerprint({**cfg.to_dict(), "provenance": provenance, "corpus": corpus.recipe})
        rep = score(np.concatenate(preds), np.concatenate(trues), fingerprint=fp, seed=cfg.seeds[0],
                    extras={"cell": cell, "config": cfg.to_dict(), "seed_accuracy": seed_acc,
                            "accuracy_std": float(np.std(seed_acc)), "runs": infos, "provenance": provenance,
                            "seconds": round(time.perf_counter() - t0, 3)})
        reports.append(rep)
    for axis in ("window", "shots"):
        if axis in grid and len(grid[axis]) > 1:
            _attach_trend(reports, axis)
    if report_path is not None:
        with open(report_path, "a", encoding="utf-8") as fh:
            for rep in reports:
                fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
    return reports


def _attach_trend(reports, axis):
    groups: dict[str, list] = {}
    for r in reports:
        rest = {k: v for k, v in r.extras["cell"].items() if k != axis}
        groups.setdefault(json.dumps(rest, sort_keys=True), []).append(r)
    for members in groups.values():
        stat = trend_statistic([m.extras["cell"][axis] for m in members], [m.accuracy for m in members])
        stat["axis"] = axis
        for m in members:
            m.extras["trend"] = stat


def format_table(reports: Sequence[EvalReport]) -> str:
    """Human-readable summary: one row per cell."""
    lines = [f"{'cell':<48} {'acc':>7} {'std':>6} {'binary':>7} {'n':>5}"]
    for r in reports:
        cell = ",".join(f"{k}={v}" for k, v in r.extras.get("cell", {}).items()) or "-"
        lines.append(f"{cell:<48} {r.accuracy:7.4f} {r.extras.get('accuracy_std', 0.0):6.4f} "
                     f"{r.binary_distracted_accuracy:7.4f} {r.n:5d}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# early vs late fusion cost


@dataclass
class FusionCost:
    """Encoder cost of two fusion designs, per sample, classifier heads excluded.

    ``*_macs`` count the whole ViT (patch projection + transformer blocks);
    ``*_block_macs`` count the transformer blocks alone.
    """

    early_macs: int  # instrumented
    late_macs: int
    early_estimate: int  # analytic
    late_estimate: int
    early_seconds_per_sample: float
    late_seconds_per_sample: float
    early_block_macs: int = 0
    late_block_macs: int = 0
    early_accuracy: float | None = None
    late_accuracy: float | None = None

    @property
    def ratio(self) -> float:
        return self.late_macs / self.early_macs

    @property
    def block_ratio(self) -> float:
        return self.late_block_macs / self.early_block_macs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratio"] = self.ratio
        d["block_ratio"] = self.block_ratio
        return d


def _vit_macs(model: DarModel, inputs, blocks_only: bool = False) -> int:
    """Instrumented multiply-accumulates of every ViT branch; optionally without the patch projection."""
    total = projection = 0
    for i, br in enumerate(model.spec.branches):
        if br.kind != "vit":
            continue
        with nn.count_macs() as c:
            model._vit_forward(i, inputs[i])
        total += c.macs
        with nn.count_macs() as c:
            nn.linear(inputs[i], model.params[f"b{i}.embed.w"], model.params[f"b{i}.embed.b"])
        projection += c.macs
    return total - projection if blocks_only else total


def model_encoder_estimate(model: DarModel, batch: int = 1) -> int:
    """Analytic multiply-accumulate count of every ViT branch (projection + blocks)."""
    total = 0
    for br in model.spec.branches:
        if br.kind == "vit":
            total += encoder_macs(br.adapter.n_tokens + 1, model.spec.encoder, br.adapter.patch_dim)
    return batch * total


def compare_fusion_cost(early: DarModel, late: DarModel, early_inputs, late_inputs, repeats: int = 3,
                        early_accuracy=None, late_accuracy=None) -> FusionCost:
    """Per-sample wall clock and encoder operation counts of two fusion designs.

    Inputs are single-sample or batched lists as accepted by
    :meth:`DarModel.forward`; counts are reported per sample, heads excluded.
    """
    n_e = len(early_inputs[0])
    n_l = len(late_inputs[0])

    def clock(model, inputs, n):
        best = float("inf")
        for _ in range(max(1, repeats)):
            t0 = time.perf_counter()
            model.forward(inputs)
            best = min(best, time.perf_counter() - t0)
        return best / n

    return FusionCost(
        early_macs=_vit_macs(early, early_inputs) // n_e,
        late_macs=_vit_macs(late, late_inputs) // n_l,
        early_estimate=model_encoder_estimate(early),
        late_estimate=model_encoder_estimate(late),
        early_seconds_per_sample=clock(early, early_inputs, n_e),
        late_seconds_per_sample=clock(late, late_inputs, n_l),
        early_block_macs=_vit_macs(early, early_inputs, blocks_only=True) // n_e,
        late_block_macs=_vit_macs(late, late_inputs, blocks_only=True) // n_l,
        early_accuracy=early_accuracy,
        late_accuracy=late_accuracy,
    )
