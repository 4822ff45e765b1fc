"""Procedural paired-modality identity benchmark.

Each identity is a face-like layout: six oriented, tinted Gabor-like blobs
placed at identity-jittered positions around fixed anchor sites (eyes, nose,
mouth, cheeks).  Each capture perturbs it with a global gain, a sub-pixel
shift and pixel noise.  Target-modality captures pass through :func:`modality_transform`,
which keeps geometry and discards colour and photometry.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import container
from .errors import CorruptCheckpointError, CorruptDataError, InvalidDatasetError, ProtocolError
from .tensor import Tensor


class Modality(str, Enum):
    SOURCE = "source"
    TARGET = "target"


@dataclass(frozen=True)
class RenderConfig:
    input_size: int = 32
    # identity-specific displacement of each blob from its anchor, as a fraction of the image size
    layout_jitter: float = 0.06
    max_shift: float = 2.0
    gain_low: float = 0.8
    gain_high: float = 1.2
    noise: float = 0.02


@dataclass(frozen=True)
class ModalityParams:
    gamma: float = 0.45
    # intensities above this fold back downwards: v -> 2*fold - v
    fold: float = 0.8
    blur: int = 3


@dataclass(frozen=True)
class BenchmarkConfig:
    num_identities: int = 64
    variations: int = 8
    seed: int = 7
    pretrain_ids: int = 48
    adapt_ids: int = 8
    eval_ids: int = 8
    render: RenderConfig = field(default_factory=RenderConfig)
    modality: ModalityParams = field(default_factory=ModalityParams)

    def validate(self) -> None:
        if min(self.num_identities, self.variations) <= 0:
            raise InvalidDatasetError("num_identities and variations must be positive")
        if min(self.pretrain_ids, self.adapt_ids, self.eval_ids) < 0:
            raise InvalidDatasetError("identity split sizes must be non-negative")
        if self.pretrain_ids + self.adapt_ids + self.eval_ids > self.num_identities:
            raise InvalidDatasetError(
                f"split sizes {self.pretrain_ids}+{self.adapt_ids}+{self.eval_ids} exceed {self.num_identities} identities")


@dataclass
class Entry:
    identity_id: int
    modality: Modality
    image: np.ndarray
    path: str

    def __eq__(self, other) -> bool:
        return (isinstance(other, Entry) and self.identity_id == other.identity_id
                and self.modality == other.modality and self.path == other.path
                and self.image.shape == other.image.shape
                and self.image.tobytes() == other.image.tobytes())


@dataclass
class IdentityDataset:
    entries: list[Entry]
    metadata: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.entries)

    def identities(self) -> list[int]:
        return sorted({e.identity_id for e in self.entries})

    def indices(self, identity_id: int | None = None, modality: Modality | None = None) -> list[int]:
        return [i for i, e in enumerate(self.entries)
                if (identity_id is None or e.identity_id == identity_id)
                and (modality is None or e.modality == modality)]

    def select(self, ids, modality: Modality | None = None) -> list[int]:
        ids = set(ids)
        return [i for i, e in enumerate(self.entries)
                if e.identity_id in ids and (modality is None or e.modality == modality)]

    def stack(self, indices=None) -> np.ndarray:
        if indices is None:
            indices = range(len(self.entries))
        return np.stack([self.entries[i].image for i in indices]).astype(np.float32)


@dataclass(frozen=True)
class PairSample:
    source_index: int
    target_index: int
    y: int


@dataclass
class FoldSplit:
    folds: list[tuple[list[int], list[int]]]

    def __len__(self) -> int:
        return len(self.folds)

    def __iter__(self):
        return iter(self.folds)


def _rng(*key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(k) for k in key])))


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------

# blob anchor sites (x, y) as fractions of the image size
ANCHORS = np.array([(0.3, 0.35), (0.7, 0.35), (0.5, 0.55), (0.5, 0.78), (0.2, 0.65), (0.8, 0.65)])


def render_identity(identity_seed: int, variation_seed: int, cfg: RenderConfig | None = None) -> Tensor:
    """Render one source-modality capture ``[3, H, W]`` in [0, 1]."""
    cfg = cfg or RenderConfig()
    size = cfg.input_size
    nb = len(ANCHORS)
    ident = _rng(identity_seed, 0x1D)
    base = ident.uniform(0.35, 0.45, size=3)
    cx = (ANCHORS[:, 0] + ident.uniform(-cfg.layout_jitter, cfg.layout_jitter, nb)) * size
    cy = (ANCHORS[:, 1] + ident.uniform(-cfg.layout_jitter, cfg.layout_jitter, nb)) * size
    theta = ident.uniform(0.0, math.pi, nb)
    freq = ident.uniform(0.04, 0.10, nb)
    sigma = ident.uniform(0.07, 0.12, nb) * size
    amp = ident.uniform(0.25, 0.5, nb) * ident.choice([-1.0, 1.0], nb)
    phase = ident.uniform(0.0, 2 * math.pi, nb)
    tint = ident.uniform(0.85, 1.0, (nb, 3))

    var = _rng(variation_seed, 0x5A)
    dx, dy = var.uniform(-cfg.max_shift, cfg.max_shift, size=2)
    gain = var.uniform(cfg.gain_low, cfg.gain_high)
    noise = var.normal(0.0, cfg.noise, size=(3, size, size))

    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64), np.arange(size, dtype=np.float64), indexing="ij")
    img = np.broadcast_to(base[:, None, None], (3, size, size)).copy()
    for b in range(nb):
        u = xx - cx[b] - dx
        v = yy - cy[b] - dy
        along = u * math.cos(theta[b]) + v * math.sin(theta[b])
        envelope = np.exp(-(u * u + v * v) / (2 * sigma[b] ** 2))
        wave = amp[b] * envelope * np.cos(2 * math.pi * freq[b] * along + phase[b])
        img += tint[b][:, None, None] * wave[None]
    img = img * gain + noise
    return Tensor(np.clip(img, 0.0, 1.0).astype(np.float32))


def modality_transform(image, params: ModalityParams | None = None) -> Tensor:
    """Simulated spectral shift: luminance -> gamma -> upper-band inversion -> box blur -> 3 channels."""
    params = params or ModalityParams()
    img = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    lum = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    v = np.clip(lum, 0.0, 1.0) ** params.gamma
    v = np.where(v > params.fold, 2 * params.fold - v, v)
    k = params.blur
    if k > 1:
        r = k // 2
        padded = np.pad(v, r, mode="edge")
        h, w = v.shape
        acc = np.zeros_like(v)
        for i in range(k):
            for j in range(k):
                acc += padded[i:i + h, j:j + w]
        v = acc / (k * k)
    v = np.clip(v, 0.0, 1.0).astype(np.float32)
    return Tensor(np.stack([v, v, v]))


# ---------------------------------------------------------------------------
# benchmark assembly
# ---------------------------------------------------------------------------

def identity_seed(bench_seed: int, identity_id: int) -> int:
    return int(_rng(bench_seed, identity_id).integers(0, 2 ** 63))


def variation_seed(bench_seed: int, identity_id: int, modality: Modality, variation: int) -> int:
    tag = 0 if modality == Modality.SOURCE else 1
    return int(_rng(bench_seed, identity_id, tag, variation).integers(0, 2 ** 63))


def entry_path(identity_id: int, modality: Modality, variation: int) -> str:
    return f"{modality.value}/{identity_id:04d}/v{variation:03d}.xst"


def render_capture(cfg: BenchmarkConfig, identity_id: int, modality: Modality, variation: int) -> np.ndarray:
    img = render_identity(identity_seed(cfg.seed, identity_id),
                          variation_seed(cfg.seed, identity_id, modality, variation), cfg.render)
    if modality == Modality.TARGET:
        img = modality_transform(img, cfg.modality)
    return img.data


def generate_benchmark(cfg: BenchmarkConfig | None = None) -> IdentityDataset:
    """All identities x variations x {source, target}, ordered as on disk."""
    cfg = cfg or BenchmarkConfig()
    cfg.validate()
    entries = []
    for modality in (Modality.SOURCE, Modality.TARGET):
        for ident in range(cfg.num_identities):
            for var in range(cfg.variations):
                entries.append(Entry(ident, modality, render_capture(cfg, ident, modality, var),
                                     entry_path(ident, modality, var)))
    return IdentityDataset(entries, {"seed": cfg.seed})


def benchmark_splits(cfg: BenchmarkConfig) -> tuple[list[int], list[int], list[int]]:
    """Disjoint (pretrain, adapt, eval) identity lists, shuffled by the benchmark seed."""
    cfg.validate()
    order = [int(i) for i in _rng(cfg.seed, 0x5B).permutation(cfg.num_identities)]
    a, b = cfg.pretrain_ids, cfg.pretrain_ids + cfg.adapt_ids
    return sorted(order[:a]), sorted(order[a:b]), sorted(order[b:b + cfg.eval_ids])


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def build_pair_set(dataset: IdentityDataset, ids, neg_per_pos: int = 3, seed: int = 0) -> list[PairSample]:
    """Every cross-modal genuine pair of ``ids`` plus ``neg_per_pos`` impostors per genuine pair.

    Impostors for a source image are drawn without replacement from the
    target images of the other identities in ``ids``.
    """
    ids = sorted(set(int(i) for i in ids))
    if not ids:
        raise ProtocolError("build_pair_set(): empty identity set")
    if neg_per_pos < 0:
        raise ProtocolError("build_pair_set(): neg_per_pos must be non-negative")
    src = {i: [] for i in ids}
    tgt = {i: [] for i in ids}
    for idx, e in enumerate(dataset.entries):
        if e.identity_id in src:
            (src if e.modality == Modality.SOURCE else tgt)[e.identity_id].append(idx)
    for i in ids:
        if not src[i] or not tgt[i]:
            missing = "source" if not src[i] else "target"
            raise ProtocolError(f"identity {i} has no {missing} images")

    rng = _rng(seed, 0x9A)
    genuine, impostor = [], []
    for i in ids:
        others = [t for j in ids if j != i for t in tgt[j]]
        for s in src[i]:
            genuine.extend(PairSample(s, t, 1) for t in tgt[i])
            want = len(tgt[i]) * neg_per_pos
            if want == 0:
                continue
            if want > len(others):
                raise ProtocolError(
                    f"identity {i}: need {want} impostor targets per source image, only {len(others)} available")
            chosen = rng.choice(len(others), size=want, replace=False)
            impostor.extend(PairSample(s, others[c], 0) for c in sorted(chosen))
    return genuine + impostor


def split_folds(ids, k: int, seed: int = 0) -> FoldSplit:
    """Shuffle ``ids`` by seed and use the i-th contiguous block as fold i's eval set."""
    ids = list(ids)
    if k < 2:
        raise ProtocolError(f"split_folds(): k={k} must be at least 2")
    if k > len(ids):
        raise ProtocolError(f"split_folds(): k={k} exceeds {len(ids)} identities")
    order = [ids[i] for i in _rng(seed, 0xF0).permutation(len(ids))]
    base, extra = divmod(len(order), k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        held = order[start:start + size]
        train = [i for i in order if i not in set(held)]
        folds.append((sorted(train), sorted(held)))
        start += size
    return FoldSplit(folds)


# ---------------------------------------------------------------------------
# disk layout: <root>/<modality>/<identity>/<sample>.xst
# ---------------------------------------------------------------------------

def save_dataset(dataset: IdentityDataset, root) -> None:
    root = Path(root)
    for e in dataset.entries:
        path = root / e.path
        path.parent.mkdir(parents=True, exist_ok=True)
        container.save_tensor(path, e.image, name=e.path)
    for m in Modality:
        (root / m.value).mkdir(parents=True, exist_ok=True)


def load_dataset(root) -> IdentityDataset:
    """Load every ``.xst`` under ``root/source`` and ``root/target`` in lexicographic path order."""
    root = Path(root)
    if not (root / Modality.SOURCE.value).is_dir():
        raise InvalidDatasetError(f"{root}: missing '{Modality.SOURCE.value}' directory")
    entries, dims = [], None
    files = sorted(p.relative_to(root).as_posix() for m in Modality if (root / m.value).is_dir()
                   for p in (root / m.value).glob("*/*.xst"))
    for rel in files:
        modality_dir, ident_dir, _ = rel.split("/")
        try:
            identity_id = int(ident_dir)
        except ValueError as exc:
            raise InvalidDatasetError(f"{root / rel}: identity directory '{ident_dir}' is not an integer") from exc
        try:
            img = container.load_tensor(root / rel)
        except CorruptCheckpointError as exc:
            raise CorruptDataError(str(exc), root / rel) from exc
        if img.ndim != 3:
            raise CorruptDataError(f"expected a [C, H, W] tensor, got dims {list(img.shape)}", root / rel)
        if not np.all((img >= 0) & (img <= 1)):
            raise CorruptDataError("pixel values outside [0, 1]", root / rel)
        if dims is None:
            dims = img.shape
        elif img.shape != dims:
            raise InvalidDatasetError(f"{root / rel}: dims {list(img.shape)} differ from {list(dims)}")
        entries.append(Entry(identity_id, Modality(modality_dir), img, rel))
    dataset = IdentityDataset(entries, {"path": str(root)})
    sources = {e.identity_id for e in entries if e.modality == Modality.SOURCE}
    orphans = sorted({e.identity_id for e in entries} - sources)
    if orphans:
        raise InvalidDatasetError(f"identities {orphans} have target images but no source images")
    return dataset


def export_pairs(dataset: IdentityDataset, pairs: list[PairSample], path) -> None:
    lines = [f"{dataset.entries[p.source_index].path}\t{dataset.entries[p.target_index].path}\t{p.y}\n"
             for p in pairs]
    Path(path).write_text("".join(lines), encoding="utf-8")
