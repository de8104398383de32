"""Feature/label ingestion, pseudo-source bootstrap plans and the synthetic benchmark.

Random streams come from numpy's ``PCG64`` bit generator seeded through
``SeedSequence``; sub-streams are derived with explicit spawn keys so a plan
or a synthetic draw is reproducible across platforms from its seed alone.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

DRLF_MAGIC = b"DRLF"
DRLF_VERSION = 1
_DRLF_HEADER = struct.Struct("<4sHQQ")

CONTAINER_MAGIC = b"DRLC"
CONTAINER_VERSION = 1
_CONTAINER_HEADER = struct.Struct("<4sHI")

RNG_ALGORITHM = "numpy.PCG64/SeedSequence"

# spawn keys for independent sub-streams of one user seed
STREAM_PLAN = 1
STREAM_SYNTH = 2
STREAM_TRAIN = 3
STREAM_SPLIT = 4
STREAM_FOLDS = 5


class DatasetError(ValueError):
    pass


class MalformedHeaderError(DatasetError):
    pass


class DimensionMismatchError(DatasetError):
    pass


class NonFiniteError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator for ``(seed, stream)``; distinct streams are independent."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=(int(stream),))))


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class LabeledSet:
    """Labeled embeddings. ``groups`` is optional bookkeeping (e.g. synthetic group ids)."""

    features: np.ndarray
    labels: np.ndarray
    class_count: int
    groups: np.ndarray | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if feats.ndim != 2:
            raise DimensionMismatchError("features must be a 2D matrix")
        if labels.ndim != 1 or labels.shape[0] != feats.shape[0]:
            raise DimensionMismatchError(
                f"{labels.shape[0] if labels.ndim == 1 else labels.shape} labels for {feats.shape[0]} feature rows"
            )
        if self.class_count < 1:
            raise DatasetError("class_count must be >= 1")
        if labels.size and (labels.min() < 0 or labels.max() >= self.class_count):
            raise DatasetError(f"labels must lie in 0..{self.class_count - 1}")
        if not np.isfinite(feats).all():
            raise NonFiniteError("features contain NaN or Inf")
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labels)
        if self.groups is not None:
            object.__setattr__(self, "groups", np.asarray(self.groups, dtype=np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledSet":
        idx = np.asarray(idx, dtype=np.int64)
        groups = None if self.groups is None else self.groups[idx]
        return LabeledSet(self.features[idx], self.labels[idx], self.class_count, groups)

    def unlabeled(self) -> "UnlabeledSet":
        return UnlabeledSet(self.features)


@dataclass(frozen=True, eq=False)
class UnlabeledSet:
    features: np.ndarray

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DimensionMismatchError("features must be a 2D matrix")
        if feats.shape[0] < 1:
            raise EmptyDatasetError("empty dataset")
        if not np.isfinite(feats).all():
            raise NonFiniteError("features contain NaN or Inf")
        object.__setattr__(self, "features", feats)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension z-scoring with statistics from one reference matrix."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> "Standardizer":
        features = np.asarray(features, dtype=np.float64)
        mean = features.mean(axis=0)
        scale = features.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(mean, scale)

    def transform(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.mean) / self.scale


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------


def encode_drlf(matrix: np.ndarray) -> bytes:
    """DRLF record: magic, u16 version, u64 rows, u64 cols, row-major f32 LE."""
    m = np.asarray(matrix)
    if m.ndim != 2:
        raise DimensionMismatchError("DRLF payload must be 2D")
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return _DRLF_HEADER.pack(DRLF_MAGIC, DRLF_VERSION, m.shape[0], m.shape[1]) + payload


def decode_drlf(buf: bytes, offset: int = 0, allow_empty: bool = False) -> tuple[np.ndarray, int]:
    if len(buf) - offset < _DRLF_HEADER.size:
        raise MalformedHeaderError("truncated DRLF header")
    magic, version, rows, cols = _DRLF_HEADER.unpack_from(buf, offset)
    if magic != DRLF_MAGIC:
        raise MalformedHeaderError(f"bad magic {magic!r}, expected {DRLF_MAGIC!r}")
    if version != DRLF_VERSION:
        raise MalformedHeaderError(f"unsupported DRLF version {version}")
    if rows == 0 and not allow_empty:
        raise EmptyDatasetError("empty dataset")
    start = offset + _DRLF_HEADER.size
    nbytes = rows * cols * 4
    if len(buf) - start < nbytes:
        raise DimensionMismatchError(f"payload holds {len(buf) - start} bytes, header declares {rows}x{cols} f32")
    data = np.frombuffer(buf, dtype="<f4", count=rows * cols, offset=start).reshape(rows, cols)
    data = data.astype(np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError("non-finite values in DRLF payload")
    return data, start + nbytes


def _infer_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        if fmt not in ("csv", "binary"):
            raise ValueError(f"unknown feature format {fmt!r}")
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def save_features(path, matrix: np.ndarray, format: str | None = None) -> None:
    """Write a feature matrix as CSV (``f0,...`` header) or DRLF binary.

    Binary stores float32; CSV writes shortest round-trip decimal reprs.
    """
    path = Path(path)
    matrix = np.asarray(matrix, dtype=np.float64)
    if _infer_format(path, format) == "binary":
        path.write_bytes(encode_drlf(matrix))
        return
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"f{j}" for j in range(matrix.shape[1])])
    for row in matrix:
        w.writerow([repr(float(x)) for x in row])
    path.write_text(buf.getvalue())


def load_features(path, format: str | None = None) -> np.ndarray:
    """Read a feature matrix; rejects malformed headers, ragged rows and NaN/Inf."""
    path = Path(path)
    if _infer_format(path, format) == "binary":
        buf = path.read_bytes()
        data, end = decode_drlf(buf)
        if end != len(buf):
            raise DimensionMismatchError(f"{len(buf) - end} trailing bytes after declared payload")
        return data

    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeaderError("missing header row")
    header = [h.strip() for h in rows[0]]
    if not header or header != [f"f{j}" for j in range(len(header))]:
        raise MalformedHeaderError(f"expected header f0,...,f{{d-1}}, got {','.join(header)}")
    body = [r for r in rows[1:] if r]
    if not body:
        raise EmptyDatasetError("empty dataset")
    d = len(header)
    for i, r in enumerate(body):
        if len(r) != d:
            raise DimensionMismatchError(f"row {i} has {len(r)} values, header declares {d}")
    try:
        data = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"unparseable value: {exc}") from None
    if not np.isfinite(data).all():
        raise NonFiniteError("features contain NaN or Inf")
    return data


def load_labels(path) -> np.ndarray:
    """Labels as one integer per line, or a CSV with a ``label`` column."""
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise EmptyDatasetError("empty label file")
    if "," in lines[0] or not lines[0].lstrip("-").isdigit():
        header = [h.strip() for h in lines[0].split(",")]
        if "label" not in header:
            raise MalformedHeaderError("label CSV needs a 'label' column")
        col = header.index("label")
        values = [ln.split(",")[col].strip() for ln in lines[1:]]
    else:
        values = lines
    try:
        labels = np.array([int(v) for v in values], dtype=np.int64)
    except ValueError as exc:
        raise DatasetError(f"non-integer label: {exc}") from None
    if labels.size and labels.min() < 0:
        raise DatasetError("labels must be nonnegative")
    return labels


def save_labels(path, labels: np.ndarray) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def write_container(path, kind: str, header: dict, blocks: Sequence[np.ndarray]) -> None:
    """Self-describing artifact: magic, u16 version, u32 JSON length, JSON, DRLF blocks."""
    meta = dict(header, kind=kind, n_blocks=len(blocks))
    js = json.dumps(meta, sort_keys=True).encode()
    parts = [_CONTAINER_HEADER.pack(CONTAINER_MAGIC, CONTAINER_VERSION, len(js)), js]
    parts.extend(encode_drlf(b) for b in blocks)
    Path(path).write_bytes(b"".join(parts))


def read_container(path, kind: str) -> tuple[dict, list[np.ndarray]]:
    buf = Path(path).read_bytes()
    if len(buf) < _CONTAINER_HEADER.size:
        raise MalformedHeaderError("truncated container")
    magic, version, hlen = _CONTAINER_HEADER.unpack_from(buf, 0)
    if magic != CONTAINER_MAGIC or version != CONTAINER_VERSION:
        raise MalformedHeaderError(f"not a v{CONTAINER_VERSION} container: {magic!r} v{version}")
    off = _CONTAINER_HEADER.size
    meta = json.loads(buf[off : off + hlen].decode())
    if meta.get("kind") != kind:
        raise MalformedHeaderError(f"container holds {meta.get('kind')!r}, expected {kind!r}")
    off += hlen
    blocks = []
    for _ in range(meta["n_blocks"]):
        block, off = decode_drlf(buf, off, allow_empty=True)
        blocks.append(block)
    if off != len(buf):
        raise DimensionMismatchError("trailing bytes after container blocks")
    return meta, blocks


# ---------------------------------------------------------------------------
# Pseudo-sources
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PseudoSourcePlan:
    """Row indices into the source for each pseudo-source.

    Bootstrap plans have equal-length lists (``subsample_size``). Plans built
    from a natural grouping via :meth:`from_groups` may be ragged and carry
    ``subsample_size=None``.
    """

    K: int
    subsample_size: int | None
    seed: int | None
    index_lists: tuple[np.ndarray, ...]
    n_source: int
    fraction: float | None = None
    rng: str = RNG_ALGORITHM

    @classmethod
    def from_groups(cls, index_lists, n_source: int) -> "PseudoSourcePlan":
        lists = tuple(np.asarray(ix, dtype=np.int64) for ix in index_lists)
        for k, ix in enumerate(lists):
            if ix.size == 0 or ix.min() < 0 or ix.max() >= n_source:
                raise DatasetError(f"group {k}: empty or out-of-range indices")
        return cls(len(lists), None, None, lists, n_source, None, "explicit")

    def group_sizes(self) -> np.ndarray:
        return np.array([len(ix) for ix in self.index_lists])

    def to_json(self) -> str:
        return json.dumps(
            {
                "K": self.K,
                "subsample_size": self.subsample_size,
                "seed": self.seed,
                "fraction": self.fraction,
                "n_source": self.n_source,
                "rng": self.rng,
                "index_lists": [ix.tolist() for ix in self.index_lists],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "PseudoSourcePlan":
        d = json.loads(text)
        lists = tuple(np.asarray(ix, dtype=np.int64) for ix in d["index_lists"])
        if len(lists) != d["K"]:
            raise DatasetError("plan K does not match number of index lists")
        return cls(d["K"], d["subsample_size"], d["seed"], lists, d["n_source"], d["fraction"], d["rng"])


def make_pseudo_sources(source: LabeledSet | int, K: int = 10, fraction: float = 0.2, seed: int = 0) -> PseudoSourcePlan:
    """Draw ``K`` bootstrap subsamples of size ``round(fraction * n)`` with replacement."""
    n = source if isinstance(source, int) else source.n
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < fraction <= 1:
        raise ValueError("fraction must lie in (0, 1]")
    size = int(np.floor(fraction * n + 0.5))
    if size == 0:
        raise DatasetError(f"subsample size rounds to 0 (n={n}, fraction={fraction})")
    rng = make_rng(seed, STREAM_PLAN)
    draws = rng.integers(0, n, size=(K, size), dtype=np.int64)
    return PseudoSourcePlan(K, size, int(seed), tuple(draws), n, float(fraction))


# ---------------------------------------------------------------------------
# Synthetic subpopulation-shift benchmark
# ---------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Gaussian groups with a label-predictive core block and a group-predictive spurious block.

    ``core_cov`` and ``spurious_cov`` are per-group diagonal variances with
    shape ``(G, d_block)`` or full covariances ``(G, d_block, d_block)``;
    scalars broadcast. ``noise_scale`` multiplies every standard deviation.
    """

    group_labels: np.ndarray
    core_means: np.ndarray
    spurious_means: np.ndarray
    source_weights: np.ndarray
    target_weights: np.ndarray
    n_source: int
    n_target: int
    class_count: int = 2
    core_cov: np.ndarray | float = 1.0
    spurious_cov: np.ndarray | float = 1.0
    noise_scale: float = 1.0
    seed: int = 0
    group_names: tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.group_labels = np.asarray(self.group_labels, dtype=np.int64)
        self.core_means = np.atleast_2d(np.asarray(self.core_means, dtype=np.float64))
        self.spurious_means = np.atleast_2d(np.asarray(self.spurious_means, dtype=np.float64))
        G = self.group_labels.shape[0]
        if self.core_means.shape[0] != G or self.spurious_means.shape[0] != G:
            raise DimensionMismatchError("one mean row per group required")
        for name in ("source_weights", "target_weights"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if w.shape != (G,) or np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
                raise DatasetError(f"{name} must be a length-{G} vector on the simplex")
            setattr(self, name, w)
        if self.group_labels.min() < 0 or self.group_labels.max() >= self.class_count:
            raise DatasetError("group labels out of range")
        self.core_cov = _as_cov(self.core_cov, G, self.core_means.shape[1], "core_cov")
        self.spurious_cov = _as_cov(self.spurious_cov, G, self.spurious_means.shape[1], "spurious_cov")
        if self.noise_scale < 0:
            raise DatasetError("noise_scale must be nonnegative")

    @property
    def n_groups(self) -> int:
        return self.group_labels.shape[0]

    @property
    def dim(self) -> int:
        return self.core_means.shape[1] + self.spurious_means.shape[1]


def _as_cov(cov, G: int, d: int, name: str) -> np.ndarray:
    """Normalize to full ``(G, d, d)`` covariances and check PSD."""
    c = np.asarray(cov, dtype=np.float64)
    if c.ndim == 0:
        c = np.broadcast_to(c, (G, d))
    if c.ndim == 1:
        c = np.broadcast_to(c, (G, d))
    if c.ndim == 2:
        if c.shape != (G, d) or np.any(c < 0):
            raise DatasetError(f"{name}: diagonal form must be nonnegative with shape ({G}, {d})")
        full = np.zeros((G, d, d))
        idx = np.arange(d)
        full[:, idx, idx] = c
        return full
    if c.shape != (G, d, d):
        raise DatasetError(f"{name}: expected shape ({G}, {d}, {d})")
    for g in range(G):
        if not np.allclose(c[g], c[g].T) or np.linalg.eigvalsh(c[g]).min() < -1e-10:
            raise DatasetError(f"{name}: group {g} covariance is not symmetric PSD")
    return c.copy()


def _cov_factor(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def _draw_groups(spec: SynthSpec, weights, n, rng):
    counts = rng.multinomial(n, weights)
    groups = np.repeat(np.arange(spec.n_groups), counts)
    feats = np.empty((n, spec.dim))
    dc = spec.core_means.shape[1]
    for g in range(spec.n_groups):
        rows = groups == g
        m = int(counts[g])
        if m == 0:
            continue
        core = rng.standard_normal((m, dc)) @ _cov_factor(spec.core_cov[g]).T
        spur = rng.standard_normal((m, spec.dim - dc)) @ _cov_factor(spec.spurious_cov[g]).T
        feats[rows, :dc] = spec.core_means[g] + spec.noise_scale * core
        feats[rows, dc:] = spec.spurious_means[g] + spec.noise_scale * spur
    perm = rng.permutation(n)
    return feats[perm], groups[perm]


def synth_generate(spec: SynthSpec) -> tuple[LabeledSet, UnlabeledSet, LabeledSet]:
    """Draw source, unlabeled target and the target's held-back labels.

    ``target_truth`` holds the same rows as ``target`` in the same order.
    """
    if spec.n_source < 1 or spec.n_target < 1:
        raise EmptyDatasetError("synthetic spec needs at least one source and one target sample")
    rng = make_rng(spec.seed, STREAM_SYNTH)
    xs, gs = _draw_groups(spec, spec.source_weights, spec.n_source, rng)
    xt, gt = _draw_groups(spec, spec.target_weights, spec.n_target, rng)
    source = LabeledSet(xs, spec.group_labels[gs], spec.class_count, gs)
    truth = LabeledSet(xt, spec.group_labels[gt], spec.class_count, gt)
    return source, truth.unlabeled(), truth


def spurious_benchmark(
    seed: int = 0,
    n_source: int = 400,
    n_target: int = 400,
    core_dim: int = 2,
    spurious_dim: int = 2,
    core_shift: float = 0.8,
    spurious_shift: float = 1.0,
    core_var: float = 1.0,
    spurious_var: float = 0.5,
    misaligned_weight: float = 0.1,
) -> SynthSpec:
    """The bundled spurious-correlation benchmark.

    Four groups ``(label, attribute)``: y0_a0, y0_a1, y1_a0, y1_a1. The
    source mixes the three majority groups, in which attribute 0 always
    comes with label 0; the target is the remaining minority group, label 1
    with attribute 0. The spurious block separates attributes more cleanly
    than the core block separates labels, so a source-trained classifier
    leans on the attribute and fails on the target group.
    """
    labels = np.array([0, 0, 1, 1])
    attrs = np.array([0, 1, 0, 1])
    core_means = np.outer(2.0 * labels - 1.0, np.full(core_dim, core_shift))
    spur_means = np.outer(2.0 * attrs - 1.0, np.full(spurious_dim, spurious_shift))
    rest = 1.0 - misaligned_weight
    return SynthSpec(
        group_labels=labels,
        core_means=core_means,
        spurious_means=spur_means,
        source_weights=np.array([0.6 * rest, misaligned_weight, 0.0, 0.4 * rest]),
        target_weights=np.array([0.0, 0.0, 1.0, 0.0]),
        n_source=n_source,
        n_target=n_target,
        core_cov=core_var,
        spurious_cov=spurious_var,
        seed=seed,
        group_names=("y0_a0", "y0_a1", "y1_a0", "y1_a1"),
    )


def split_validation(
    data: LabeledSet,
    per_class: int,
    seed: int = 0,
    classes: Sequence[int] | None = None,
) -> tuple[LabeledSet, LabeledSet]:
    """Hold out exactly ``per_class`` rows of each class as a validation set.

    ``classes`` defaults to every class id; pass the classes actually present
    when the labeled set covers a single subpopulation. Both halves keep the
    input's row order.
    """
    if per_class < 0:
        raise ValueError("per_class must be >= 0")
    classes = range(data.class_count) if classes is None else classes
    rng = make_rng(seed, STREAM_SPLIT)
    chosen = []
    for c in classes:
        rows = np.flatnonzero(data.labels == c)
        if rows.size < per_class:
            raise DatasetError(f"class {c} has {rows.size} samples, {per_class} required")
        chosen.append(rng.permutation(rows)[:per_class])
    val_idx = np.sort(np.concatenate(chosen)) if chosen else np.empty(0, dtype=np.int64)
    mask = np.ones(data.n, dtype=bool)
    mask[val_idx] = False
    return data.subset(val_idx), data.subset(np.flatnonzero(mask))
