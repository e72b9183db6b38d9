"""Tri-modal datasets: synthetic generation, the .tmds on-disk format,
seeded 8:1:1 splitting, and view-level modality masking.

Synthetic samples are driven by a latent vector with one block shared by all
modalities and one private block per modality. Label logits mix a marginal
term on the shared block with cross-modal terms (a linear part split across
the private blocks plus pairwise products of private coordinates), weighted
by ``cross_modal_strength``: at 0 every modality carries the full signal on
its own; at 1 the signal only exists jointly. Each modality's stored
embedding is a fixed random linear read-out of (shared + private) plus
Gaussian noise. Per-label intercepts are calibrated by bisection so realized
positive rates match the requested targets.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy import special

from .config import LABEL_COUNT, MODALITIES, ConfigError
from .model import ModalityId, ModalityMask

MAGIC = b"TMDS"
FORMAT_VERSION = 1
PRESENCE_BITS = {"image": 0, "text": 1, "tabular": 2}

# internal mixing constants of the label model (see module docstring)
_SIGNAL_GAIN = 3.0
_LINEAR_WEIGHT = 0.8
_INTERACTION_WEIGHT = 0.6

DEFAULT_LABEL_RATES = (
    0.35, 0.32, 0.28, 0.25, 0.22, 0.20, 0.18, 0.15, 0.12, 0.10,
    # four deliberately scarce labels, echoing heavily imbalanced targets
    0.05, 0.05, 0.03, 0.02,
)


class DataFormatError(ValueError):
    """A dataset file violates the .tmds layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


@dataclass(frozen=True)
class ModalityShape:
    name: str
    token_count: int
    native_dim: int


@dataclass(frozen=True)
class DatasetHeader:
    modalities: tuple[ModalityShape, ...]
    label_count: int = LABEL_COUNT

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {m.name: (m.token_count, m.native_dim) for m in self.modalities}


@dataclass
class Sample:
    embeddings: dict[str, np.ndarray]
    presence: ModalityMask
    labels: np.ndarray


@dataclass
class Dataset:
    """In-memory dataset; embeddings are float32 [n, tokens, native_dim]."""

    header: DatasetHeader
    embeddings: dict[str, np.ndarray]
    labels: np.ndarray  # bool [n, label_count]
    presence: np.ndarray  # bool [n, 3], columns per PRESENCE_BITS

    def __post_init__(self):
        n = self.labels.shape[0]
        for m in self.header.modalities:
            e = self.embeddings[m.name]
            if e.shape != (n, m.token_count, m.native_dim):
                raise ConfigError(
                    f"embeddings for '{m.name}' shaped {e.shape}, header says {(n, m.token_count, m.native_dim)}"
                )
        if self.presence.shape != (n, 3):
            raise ConfigError(f"presence shaped {self.presence.shape}, expected {(n, 3)}")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices)
        return Dataset(
            header=self.header,
            embeddings={k: v[idx] for k, v in self.embeddings.items()},
            labels=self.labels[idx],
            presence=self.presence[idx],
        )

    def batch(self, indices) -> dict[str, np.ndarray]:
        idx = np.asarray(indices)
        return {k: v[idx] for k, v in self.embeddings.items()}

    def uniform_mask(self) -> ModalityMask:
        """The shared presence pattern, requiring it to be sample-uniform."""
        cols = {name: self.presence[:, bit] for name, bit in PRESENCE_BITS.items()}
        out = {}
        for name, col in cols.items():
            if len(col) and not (col.all() or not col.any()):
                raise ConfigError(f"presence of '{name}' varies across samples; mask views must be uniform")
            out[name] = bool(col.all()) if len(col) else True
        return ModalityMask(**out)

    def sample(self, i: int) -> Sample:
        present = {name: bool(self.presence[i, bit]) for name, bit in PRESENCE_BITS.items()}
        return Sample(
            embeddings={k: v[i] for k, v in self.embeddings.items() if present[k]},
            presence=ModalityMask(**present),
            labels=self.labels[i],
        )


def mask_modality(dataset: Dataset, modality) -> Dataset:
    """A view with one modality marked absent everywhere; embeddings untouched."""
    name = modality.value if isinstance(modality, ModalityId) else str(modality)
    if name not in PRESENCE_BITS:
        raise ConfigError(f"unknown modality '{name}'; expected one of {MODALITIES}")
    presence = dataset.presence.copy()
    presence[:, PRESENCE_BITS[name]] = False
    return Dataset(
        header=dataset.header,
        embeddings=dataset.embeddings,  # shared storage, mask is view-level
        labels=dataset.labels,
        presence=presence,
    )


@dataclass(frozen=True)
class SynthSpec:
    sample_count: int = 2000
    image_tokens: int = 6
    image_dim: int = 16
    text_tokens: int = 7
    text_dim: int = 12
    tabular_features: int = 5
    latent_dim: int = 4
    cross_modal_strength: float = 0.8
    label_rates: tuple[float, ...] = DEFAULT_LABEL_RATES
    noise_sigma: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.sample_count < 1:
            raise ConfigError("sample_count must be >= 1")
        dims = (
            self.image_tokens, self.image_dim, self.text_tokens, self.text_dim,
            self.tabular_features, self.latent_dim,
        )
        if any(d < 1 for d in dims):
            raise ConfigError("token counts and dims must be positive")
        if not 0.0 <= self.cross_modal_strength <= 1.0:
            raise ConfigError("cross_modal_strength must lie in [0, 1]")
        if len(self.label_rates) != LABEL_COUNT:
            raise ConfigError(f"label_rates needs {LABEL_COUNT} entries")
        if any(not 0.0 < r < 1.0 for r in self.label_rates):
            raise ConfigError("label rates must lie strictly inside (0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")

    def header(self) -> DatasetHeader:
        return DatasetHeader(
            modalities=(
                ModalityShape("image", self.image_tokens, self.image_dim),
                ModalityShape("text", self.text_tokens, self.text_dim),
                ModalityShape("tabular", self.tabular_features, 1),
            )
        )


def _calibrate_intercept(signal: np.ndarray, target: float) -> float:
    """Bisect b so mean(sigmoid(b + signal)) hits the target positive rate."""
    lo, hi = -40.0, 40.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if special.expit(mid + signal).mean() < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(spec: SynthSpec) -> Dataset:
    """Deterministic synthetic tri-modal dataset per the latent-block model."""
    rng = np.random.default_rng(spec.seed)
    n, L = spec.sample_count, spec.latent_dim
    shared = rng.standard_normal((n, L))
    private = {m: rng.standard_normal((n, L)) for m in MODALITIES}

    header = spec.header()
    embeddings = {}
    for m in header.modalities:
        width = m.token_count * m.native_dim
        mix = rng.standard_normal((2 * L, width)) / np.sqrt(2 * L)
        flat = np.hstack([shared, private[m.name]]) @ mix
        flat = flat + spec.noise_sigma * rng.standard_normal((n, width))
        embeddings[m.name] = flat.reshape(n, m.token_count, m.native_dim).astype(np.float32)

    k = LABEL_COUNT
    u = rng.standard_normal((k, L))
    v = {m: rng.standard_normal((k, L)) for m in MODALITIES}
    pair_idx = {pair: (rng.integers(0, L, k), rng.integers(0, L, k)) for pair in ("it", "is", "ts")}

    marginal = shared @ u.T / np.sqrt(L)
    linear = sum(private[m] @ v[m].T for m in MODALITIES) / np.sqrt(3 * L)
    z_i, z_t, z_s = private["image"], private["text"], private["tabular"]
    interaction = (
        z_i[:, pair_idx["it"][0]] * z_t[:, pair_idx["it"][1]]
        + z_i[:, pair_idx["is"][0]] * z_s[:, pair_idx["is"][1]]
        + z_t[:, pair_idx["ts"][0]] * z_s[:, pair_idx["ts"][1]]
    ) / np.sqrt(3)

    s = spec.cross_modal_strength
    signal = _SIGNAL_GAIN * (
        (1.0 - s) * marginal + s * (_LINEAR_WEIGHT * linear + _INTERACTION_WEIGHT * interaction)
    )
    logits = np.empty_like(signal)
    for j, rate in enumerate(spec.label_rates):
        logits[:, j] = _calibrate_intercept(signal[:, j], rate) + signal[:, j]
    labels = rng.uniform(size=(n, k)) < special.expit(logits)

    return Dataset(
        header=header,
        embeddings=embeddings,
        labels=labels,
        presence=np.ones((n, 3), dtype=bool),
    )


def split_811(dataset_or_count, seed: int):
    """Seeded disjoint cover: floor(0.8n) / floor(0.1n) / remainder."""
    n = dataset_or_count if isinstance(dataset_or_count, int) else len(dataset_or_count)
    if n < 10:
        raise ConfigError(f"need at least 10 samples to split 8:1:1, got {n}")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(0.8 * n)
    n_val = int(0.1 * n)
    return order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:]


# ----- .tmds serialization ---------------------------------------------------
#
# magic "TMDS" | u16 LE version | u8 modality count
# per modality: u8 name length | UTF-8 name | u32 LE token_count | u32 LE native_dim
# u8 label_count | u64 LE sample_count
# per sample: u8 presence bitmask (bit0=image, bit1=text, bit2=tabular)
#             u16 LE labels (low label_count bits)
#             per PRESENT modality, in header order: row-major float32 LE matrix


def write_dataset(dataset: Dataset, path: str) -> None:
    header = dataset.header
    if header.label_count > 16:
        raise ConfigError("label bitmask is 16 bits wide")
    names = [m.name for m in header.modalities]
    for name in names:
        if name not in PRESENCE_BITS:
            raise ConfigError(f"modality '{name}' has no presence bit; expected {MODALITIES}")
    n = len(dataset)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(struct.pack("<B", len(header.modalities)))
        for m in header.modalities:
            raw = m.name.encode("utf-8")
            fh.write(struct.pack("<B", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", m.token_count, m.native_dim))
        fh.write(struct.pack("<B", header.label_count))
        fh.write(struct.pack("<Q", n))
        for i in range(n):
            bits = 0
            for name, bit in PRESENCE_BITS.items():
                if name in {m.name for m in header.modalities} and dataset.presence[i, bit]:
                    bits |= 1 << bit
            label_bits = 0
            for j in range(header.label_count):
                if dataset.labels[i, j]:
                    label_bits |= 1 << j
            fh.write(struct.pack("<BH", bits, label_bits))
            for m in header.modalities:
                if bits & (1 << PRESENCE_BITS[m.name]):
                    mat = dataset.embeddings[m.name][i]
                    if mat.shape != (m.token_count, m.native_dim):
                        raise DataFormatError(
                            f"sample {i}: modality '{m.name}' shaped {mat.shape}, "
                            f"header says {(m.token_count, m.native_dim)}"
                        )
                    fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, fh):
        self.fh = fh
        self.offset = 0

    def read(self, count: int, what: str) -> bytes:
        data = self.fh.read(count)
        if len(data) != count:
            raise DataFormatError(f"truncated while reading {what}", offset=self.offset)
        self.offset += count
        return data

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt), what))


def read_dataset(path: str) -> Dataset:
    with open(path, "rb") as fh:
        r = _Reader(fh)
        if r.read(4, "magic") != MAGIC:
            raise DataFormatError("bad magic; not a .tmds file", offset=0)
        (version,) = r.unpack("<H", "version")
        if version != FORMAT_VERSION:
            raise DataFormatError(f"unsupported version {version}", offset=4)
        (mod_count,) = r.unpack("<B", "modality count")
        mods = []
        for _ in range(mod_count):
            (name_len,) = r.unpack("<B", "modality name length")
            name = r.read(name_len, "modality name").decode("utf-8")
            tokens, dim = r.unpack("<II", f"shape of '{name}'")
            if name not in PRESENCE_BITS:
                raise DataFormatError(f"unknown modality '{name}'", offset=r.offset)
            if tokens < 1 or dim < 1:
                raise DataFormatError(f"degenerate shape for '{name}': {tokens}x{dim}", offset=r.offset)
            mods.append(ModalityShape(name, tokens, dim))
        (label_count,) = r.unpack("<B", "label count")
        (n,) = r.unpack("<Q", "sample count")
        header = DatasetHeader(modalities=tuple(mods), label_count=label_count)

        embeddings = {m.name: np.zeros((n, m.token_count, m.native_dim), dtype=np.float32) for m in mods}
        labels = np.zeros((n, label_count), dtype=bool)
        presence = np.zeros((n, 3), dtype=bool)
        for i in range(n):
            bits, label_bits = r.unpack("<BH", f"record head of sample {i}")
            if label_bits >> label_count:
                raise DataFormatError(
                    f"sample {i}: label bits beyond declared label_count={label_count}", offset=r.offset
                )
            for name, bit in PRESENCE_BITS.items():
                presence[i, bit] = bool(bits & (1 << bit))
            for j in range(label_count):
                labels[i, j] = bool(label_bits & (1 << j))
            for m in mods:
                if bits & (1 << PRESENCE_BITS[m.name]):
                    count = m.token_count * m.native_dim * 4
                    raw = r.read(count, f"matrix of sample {i}, modality '{m.name}'")
                    embeddings[m.name][i] = np.frombuffer(raw, dtype="<f4").reshape(
                        m.token_count, m.native_dim
                    )
        trailing = fh.read(1)
        if trailing:
            raise DataFormatError("trailing bytes after final sample", offset=r.offset)
    return Dataset(header=header, embeddings=embeddings, labels=labels, presence=presence)
