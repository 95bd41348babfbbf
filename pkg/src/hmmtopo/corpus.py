"""Feature files, manifests and the seeded synthetic corpus generator.

``HMF1`` feature format (little-endian)::

    bytes 0-3   magic b"HMF1"
    bytes 4-7   uint32 T (frames)
    bytes 8-11  uint32 D (dimensions)
    then        T*D float32, row-major

A minimal fixed layout keeps the corpus dependency-free and lets tests
compare files byte for byte.

Manifest format: one utterance per line, ``<feature path>\\t<label> <label> ...``.
Optional header comments ``#split <name>`` and ``#vocab <label> ...``;
relative feature paths are resolved against the manifest's directory.
"""
from __future__ import annotations

import itertools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import substream
from .core import GmmEmission, HmmError, HmmModel, UsageError
from .modelio import save_models

MAGIC = b"HMF1"
_HEADER = struct.Struct("<4sII")


class FeatureFormatError(HmmError):
    pass


class BadMagicError(FeatureFormatError):
    pass


class TruncatedPayloadError(FeatureFormatError):
    pass


class NonFiniteFeatureError(FeatureFormatError):
    pass


class ManifestError(HmmError):
    pass


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    """T x D feature frames; stored as float32, the on-disk precision."""

    frames: np.ndarray
    frame_period: float = 0.01

    def __post_init__(self):
        f = np.array(self.frames, dtype=np.float32)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise UsageError(f"feature matrix must be T x D with T, D >= 1, got shape {f.shape}")
        if not np.all(np.isfinite(f)):
            raise UsageError("features contain NaN or Inf")
        f.flags.writeable = False
        object.__setattr__(self, "frames", f)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class Utterance:
    uid: str
    features: FeatureSequence
    transcript: tuple[str, ...]


def write_features(seq: FeatureSequence, path) -> None:
    t, d = seq.frames.shape
    payload = np.ascontiguousarray(seq.frames, dtype="<f4").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, t, d) + payload)


def read_features(path) -> FeatureSequence:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        if data[:4] != MAGIC[: len(data[:4])]:
            raise BadMagicError(f"{path}: not an HMF1 file")
        raise TruncatedPayloadError(f"{path}: header truncated")
    magic, t, d = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * t * d
    if len(data) < expected:
        raise TruncatedPayloadError(f"{path}: header says {t}x{d} floats, payload has {(len(data) - _HEADER.size) // 4}")
    if len(data) > expected:
        raise TruncatedPayloadError(f"{path}: {len(data) - expected} trailing bytes after payload")
    if t == 0 or d == 0:
        raise FeatureFormatError(f"{path}: empty feature matrix ({t}x{d})")
    frames = np.frombuffer(data, dtype="<f4", count=t * d, offset=_HEADER.size).reshape(t, d)
    if not np.all(np.isfinite(frames)):
        raise NonFiniteFeatureError(f"{path}: NaN or Inf in payload")
    return FeatureSequence(frames)


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    transcript: tuple[str, ...]


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    vocabulary: tuple[str, ...] | None = None
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.path in seen:
                raise ManifestError(f"duplicate feature path {e.path}")
            seen.add(e.path)
            if not e.transcript:
                raise ManifestError(f"empty transcript for {e.path}")
        if self.vocabulary is not None:
            vocab = set(self.vocabulary)
            for e in self.entries:
                bad = [w for w in e.transcript if w not in vocab]
                if bad:
                    raise ManifestError(f"{e.path}: labels {bad} not in declared vocabulary")

    def labels(self) -> tuple[str, ...]:
        """Declared vocabulary, or the sorted set of labels actually used."""
        if self.vocabulary is not None:
            return tuple(self.vocabulary)
        return tuple(sorted({w for e in self.entries for w in e.transcript}))

    def __len__(self):
        return len(self.entries)


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    entries = []
    split, vocab = "train", None
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, rest = line[1:].partition(" ")
            if key == "split":
                split = rest.strip()
            elif key == "vocab":
                vocab = tuple(rest.split())
            continue
        fpath, _, labels = line.partition("\t")
        transcript = tuple(labels.split())
        if not fpath.strip():
            raise ManifestError(f"{path}:{lineno}: missing feature path")
        if not transcript:
            raise ManifestError(f"{path}:{lineno}: empty transcript for {fpath}")
        entries.append(ManifestEntry(fpath.strip(), transcript))
    return CorpusManifest(entries, split=split, vocabulary=vocab, root=path.parent)


def write_manifest(manifest: CorpusManifest, path) -> None:
    lines = [f"#split {manifest.split}"]
    if manifest.vocabulary is not None:
        lines.append("#vocab " + " ".join(manifest.vocabulary))
    lines += [f"{e.path}\t{' '.join(e.transcript)}" for e in manifest.entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_utterances(manifest: CorpusManifest) -> list[Utterance]:
    out = []
    for e in manifest.entries:
        p = Path(e.path)
        if not p.is_absolute():
            p = manifest.root / p
        out.append(Utterance(e.path, read_features(p), e.transcript))
    return out


# ---------------------------------------------------------------------------
# synthetic corpora

TOPOLOGIES = ("left-to-right", "sparse")


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a synthetic corpus; ``seed`` determines everything.

    ``topology='left-to-right'`` draws one random left-to-right generator
    per word with ``states`` emitting states.  ``topology='sparse'`` builds
    words out of ``states`` segments; every segment owns a pair of
    prototype Gaussians shared by all words, and words differ only in how
    they move between the two prototypes (fast alternation with a back
    edge, or one of the two block orders).  The resulting generators have
    2*states emitting states and a sparse, non-left-to-right support.
    """

    vocab_size: int = 5
    dim: int = 4
    states: int = 3
    topology: str = "left-to-right"
    n_utterances: int = 200
    words_min: int = 1
    words_max: int = 3
    noise: float = 0.0
    spread: float = 3.0
    state_std: float = 1.0
    self_loop: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if self.topology not in TOPOLOGIES:
            raise ValueError(f"topology must be one of {TOPOLOGIES}")
        if self.vocab_size < 1 or self.dim < 1 or self.states < 1 or self.n_utterances < 0:
            raise ValueError("vocab_size, dim and states must be >= 1")
        if not 1 <= self.words_min <= self.words_max:
            raise ValueError("need 1 <= words_min <= words_max")
        if self.noise < 0 or self.state_std < 0 or not 0 < self.self_loop < 1:
            raise ValueError("noise and state_std must be >= 0, self_loop in (0, 1)")
        if self.topology == "sparse" and self.vocab_size > 3 ** self.states:
            raise ValueError(f"sparse topology with {self.states} segments supports at most {3 ** self.states} words")


# generator emission std below this is replaced by it (zero-variance guard)
MIN_GENERATOR_STD = 1e-6

# segment dynamics of the sparse generator, as (state, next) probabilities;
# "p"/"q" are the segment's two prototypes, "out" leaves the segment
_SEGMENT_PATTERNS = {
    "alt": ("p", {"p": {"p": 0.2, "q": 0.8}, "q": {"q": 0.2, "p": 0.6, "out": 0.2}}),
    "pq": ("p", {"p": {"p": 0.75, "q": 0.25}, "q": {"q": 0.75, "out": 0.25}}),
    "qp": ("q", {"q": {"q": 0.75, "p": 0.25}, "p": {"p": 0.75, "out": 0.25}}),
}


def word_labels(n: int) -> list[str]:
    width = len(str(n - 1))
    return [f"w{i:0{width}d}" for i in range(n)]


def _left_to_right_generators(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, HmmModel]:
    std = max(spec.state_std, MIN_GENERATOR_STD)
    models = {}
    for label in word_labels(spec.vocab_size):
        n = spec.states
        trans = np.zeros((n + 2, n + 2))
        trans[0, 1] = 1.0
        for i in range(1, n + 1):
            stay = rng.uniform(spec.self_loop - 0.15, min(spec.self_loop + 0.15, 0.95))
            trans[i, i] = stay
            trans[i, i + 1] = 1.0 - stay
        means = rng.normal(0.0, spec.spread, size=(n, spec.dim))
        ems = [GmmEmission([1.0], mu[None, :], np.full((1, spec.dim), std * std)) for mu in means]
        models[label] = HmmModel(label, trans, ems)
    return models


def _sparse_generators(spec: SyntheticSpec, rng: np.random.Generator) -> dict[str, HmmModel]:
    std = max(spec.state_std, MIN_GENERATOR_STD)
    nseg = spec.states
    protos = rng.normal(0.0, spec.spread, size=(nseg, 2, spec.dim))
    combos = list(itertools.product(sorted(_SEGMENT_PATTERNS), repeat=nseg))
    order = rng.permutation(len(combos))[: spec.vocab_size]
    models = {}
    for label, ci in zip(word_labels(spec.vocab_size), sorted(order)):
        patterns = combos[ci]
        n = 2 * nseg
        ids = [f"s{s + 1}{x}" for s in range(nseg) for x in "pq"]
        index = {sid: k + 1 for k, sid in enumerate(ids)}
        trans = np.zeros((n + 2, n + 2))
        entries = [index[f"s{s + 1}{_SEGMENT_PATTERNS[p][0]}"] for s, p in enumerate(patterns)] + [n + 1]
        trans[0, entries[0]] = 1.0
        for s, p in enumerate(patterns):
            for src, row in _SEGMENT_PATTERNS[p][1].items():
                for dst, prob in row.items():
                    col = entries[s + 1] if dst == "out" else index[f"s{s + 1}{dst}"]
                    trans[index[f"s{s + 1}{src}"], col] += prob
        ems = [
            GmmEmission([1.0], protos[s, x][None, :], np.full((1, spec.dim), std * std))
            for s in range(nseg)
            for x in range(2)
        ]
        models[label] = HmmModel(label, trans, ems, ids)
    return models


def generator_models(spec: SyntheticSpec) -> dict[str, HmmModel]:
    rng = substream(spec.seed, "synthetic/models")
    if spec.topology == "sparse":
        return _sparse_generators(spec, rng)
    return _left_to_right_generators(spec, rng)


def sample_path(model: HmmModel, rng: np.random.Generator, max_frames: int = 100_000) -> list[int]:
    """Emitting-state path (1-based indices) from entry to exit."""
    path = []
    cum = np.cumsum(model.trans, axis=1)
    state = 0
    while True:
        state = int(np.searchsorted(cum[state], rng.random() * cum[state, -1], side="right"))
        if state == model.exit:
            return path
        path.append(state)
        if len(path) > max_frames:
            raise HmmError(f"generator {model.label} did not reach exit in {max_frames} frames")


@dataclass
class SyntheticCorpus:
    spec: SyntheticSpec
    manifest: CorpusManifest
    utterances: list[Utterance]
    models: dict[str, HmmModel]
    state_paths: list[np.ndarray]
    """Per utterance, a (T, 2) array of (word position, 1-based generator state)."""


def sample_corpus(spec: SyntheticSpec, split: str = "train") -> SyntheticCorpus:
    """Draw a corpus from the spec's generator models.

    Generators come from the ``synthetic/models`` substream and utterances
    from ``synthetic/<split>``, so train and test splits of one spec share
    their generators.
    """
    models = generator_models(spec)
    labels = list(models)
    rng = substream(spec.seed, f"synthetic/{split}")
    entries, utts, paths = [], [], []
    width = max(5, len(str(spec.n_utterances)))
    for u in range(spec.n_utterances):
        nwords = int(rng.integers(spec.words_min, spec.words_max + 1))
        words = [labels[int(i)] for i in rng.integers(0, len(labels), size=nwords)]
        frames, states = [], []
        for pos, w in enumerate(words):
            m = models[w]
            path = sample_path(m, rng)
            for s in path:
                e = m.emissions[s - 1]
                comp = int(rng.choice(e.n_components, p=e.weights)) if e.n_components > 1 else 0
                std = np.sqrt(e.variances[comp]) if spec.state_std > 0 else 0.0
                frames.append(e.means[comp] + std * rng.standard_normal(spec.dim))
                states.append((pos, s))
        x = np.asarray(frames)
        if spec.noise > 0:
            x = x + spec.noise * rng.standard_normal(x.shape)
        uid = f"{split}_{u:0{width}d}.hmf"
        entries.append(ManifestEntry(uid, tuple(words)))
        utts.append(Utterance(uid, FeatureSequence(x), tuple(words)))
        paths.append(np.asarray(states, dtype=np.int64))
    manifest = CorpusManifest(entries, split=split, vocabulary=tuple(labels))
    return SyntheticCorpus(spec, manifest, utts, models, paths)


def write_corpus(corpus: SyntheticCorpus, out_dir, manifest_name: str | None = None) -> Path:
    """Write features, manifest and generator models; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for u in corpus.utterances:
        write_features(u.features, out / u.uid)
    mpath = out / (manifest_name or f"{corpus.manifest.split}.manifest")
    write_manifest(corpus.manifest, mpath)
    save_models(corpus.models, out / "generators")
    return mpath


def corpus_frames(utterances: Sequence[Utterance]) -> np.ndarray:
    if not utterances:
        raise UsageError("empty corpus")
    return np.concatenate([np.asarray(u.features.frames, dtype=np.float64) for u in utterances])


def global_stats(utterances: Sequence[Utterance]) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and variance over every frame of the corpus."""
    x = corpus_frames(utterances)
    var = x.var(axis=0)
    if not np.all(var > 0) or not math.isfinite(float(var.sum())):
        raise UsageError("corpus has zero variance in some dimension")
    return x.mean(axis=0), var
