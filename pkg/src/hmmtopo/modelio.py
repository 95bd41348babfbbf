"""Text serialization of models (``HMMTOPO 1`` format).

Grammar, one model per file, tokens separated by single spaces::

    HMMTOPO 1
    label <label>
    N <n_emitting> D <dim>
    states <id_1> ... <id_N>
    transitions
    <N+2 lines of N+2 linear probabilities>        rows: entry, 1..N, exit
    emission <id_k> <M_k>                         repeated for k = 1..N
    <M_k lines: weight mean_1..mean_D var_1..var_D>
    end

Every float is written with 17 significant digits (``%.17g``), which
round-trips IEEE doubles exactly, so ``format(parse(text)) == text``.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import GmmEmission, HmmError, HmmModel

MAGIC = "HMMTOPO 1"
SUFFIX = ".hmm"


class ModelFormatError(HmmError):
    pass


def _f(x: float) -> str:
    return format(float(x), ".17g")


def format_model(m: HmmModel) -> str:
    lines = [MAGIC, f"label {m.label}", f"N {m.n_states} D {m.dim}", "states " + " ".join(m.state_ids), "transitions"]
    lines += [" ".join(_f(p) for p in row) for row in m.trans]
    for sid, e in zip(m.state_ids, m.emissions):
        lines.append(f"emission {sid} {e.n_components}")
        for w, mu, var in zip(e.weights, e.means, e.variances):
            lines.append(" ".join([_f(w)] + [_f(v) for v in mu] + [_f(v) for v in var]))
    lines.append("end")
    return "\n".join(lines) + "\n"


def parse_model(text: str) -> HmmModel:
    lines = text.splitlines()
    pos = 0

    def take() -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise ModelFormatError("unexpected end of model file")
        pos += 1
        return lines[pos - 1].split(" ")

    def floats(tokens: list[str], count: int) -> list[float]:
        if len(tokens) != count:
            raise ModelFormatError(f"line {pos}: expected {count} numbers, got {len(tokens)}")
        try:
            return [float(t) for t in tokens]
        except ValueError as exc:
            raise ModelFormatError(f"line {pos}: {exc}") from None

    if not lines or lines[0] != MAGIC:
        raise ModelFormatError("missing 'HMMTOPO 1' header")
    pos = 1
    tok = take()
    if tok[0] != "label" or len(tok) != 2:
        raise ModelFormatError("bad label line")
    label = tok[1]
    tok = take()
    if len(tok) != 4 or tok[0] != "N" or tok[2] != "D":
        raise ModelFormatError("bad 'N <n> D <d>' line")
    n, d = int(tok[1]), int(tok[3])
    tok = take()
    if tok[0] != "states" or len(tok) != n + 1:
        raise ModelFormatError("bad states line")
    ids = tok[1:]
    if take() != ["transitions"]:
        raise ModelFormatError("expected 'transitions'")
    trans = [floats(take(), n + 2) for _ in range(n + 2)]
    emissions = []
    for sid in ids:
        tok = take()
        if len(tok) != 3 or tok[0] != "emission" or tok[1] != sid:
            raise ModelFormatError(f"line {pos}: expected 'emission {sid} <M>'")
        rows = np.array([floats(take(), 1 + 2 * d) for _ in range(int(tok[2]))])
        emissions.append(GmmEmission(rows[:, 0], rows[:, 1:1 + d], rows[:, 1 + d:]))
    if take() != ["end"]:
        raise ModelFormatError("expected 'end'")
    try:
        return HmmModel(label, trans, emissions, ids)
    except HmmError as exc:
        raise ModelFormatError(str(exc)) from None


def save_model(m: HmmModel, path) -> None:
    Path(path).write_text(format_model(m), encoding="utf-8")


def load_model(path) -> HmmModel:
    return parse_model(Path(path).read_text(encoding="utf-8"))


def save_models(models: Mapping[str, HmmModel] | Iterable[HmmModel], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    items = models.values() if isinstance(models, Mapping) else models
    written = []
    for m in sorted(items, key=lambda m: m.label):
        p = directory / f"{m.label}{SUFFIX}"
        save_model(m, p)
        written.append(p)
    return written


def load_models(directory) -> dict[str, HmmModel]:
    """Load every ``*.hmm`` file of a directory, keyed and ordered by label."""
    files = sorted(Path(directory).glob(f"*{SUFFIX}"))
    if not files:
        raise ModelFormatError(f"no model files in {directory}")
    models = [load_model(p) for p in files]
    out = {m.label: m for m in sorted(models, key=lambda m: m.label)}
    if len(out) != len(models):
        raise ModelFormatError(f"duplicate labels in {directory}")
    return out
