"""Coverage, codebook health, representation distance maps and embedding export."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import EnvSpec, MazeLayout, MazeState, reachable_graph, render


class LogParseError(ValueError):
    pass


@dataclass
class CoverageRecord:
    counts: np.ndarray       # (height, width) visit counts
    reachable: int

    @property
    def fraction(self) -> float:
        return float((self.counts > 0).sum()) / self.reachable


def read_trajectory(path) -> list[tuple[int, int]]:
    cells = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LogParseError(f"{path}: empty trajectory log")
        try:
            ri, ci = header.index("row"), header.index("col")
        except ValueError:
            raise LogParseError(f"{path}: line 1: header lacks row/col columns") from None
        for lineno, row in enumerate(reader, start=2):
            try:
                cells.append((int(row[ri]), int(row[ci])))
            except (IndexError, ValueError):
                raise LogParseError(f"{path}: line {lineno}: malformed row {row!r}") from None
    return cells


def coverage(log, layout: MazeLayout) -> CoverageRecord:
    """Visit counts from a trajectory CSV path or an iterable of (row, col) cells."""
    cells = read_trajectory(log) if isinstance(log, (str, Path)) else list(log)
    if not cells:
        raise LogParseError("coverage needs a non-empty log")
    counts = np.zeros((layout.height, layout.width), dtype=np.int64)
    for r, c in cells:
        if not (0 <= r < layout.height and 0 <= c < layout.width):
            raise LogParseError(f"cell {(r, c)} outside the {layout.height}x{layout.width} maze")
        counts[r, c] += 1
    graph = reachable_graph(layout)
    # every layout is connected, so all cells with a neighbour (or the lone cell) are reachable
    reachable = sum(1 for cell, nbs in graph.items() if nbs or len(graph) == 1)
    return CoverageRecord(counts, reachable)


@dataclass
class CodebookStats:
    usage: np.ndarray        # (G, L)
    perplexity: np.ndarray   # (G,)
    dead: np.ndarray         # (G,) codes with zero usage

    @property
    def dead_fraction(self) -> float:
        return float(self.dead.sum()) / self.usage.size


def perplexity(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    total = counts.sum()
    if total <= 0:
        return 1.0
    p = counts[counts > 0] / total
    return float(np.exp(-(p * np.log(p)).sum()))


def codebook_stats(cb, window: bool = False) -> CodebookStats:
    """Per-group perplexity of code usage (cumulative, or since the last window reset)."""
    usage = cb.window_usage if window else cb.usage
    perp = np.array([perplexity(u) for u in usage])
    dead = (usage == 0).sum(axis=1)
    return CodebookStats(usage.copy(), perp, dead)


def _embed_cells(model, spec: EnvSpec, quantized: bool, goal=None) -> np.ndarray:
    layout = spec.layout
    cells = layout.cells()
    obs = np.stack([render(MazeState(cell, goal, 0, 0), spec) for cell in cells])
    return model.embed(obs, quantized=quantized).z.data.astype(np.float64)


def distance_map(model, spec: EnvSpec, anchor=None, quantized: bool = True) -> np.ndarray:
    """Euclidean distance between each cell's deterministic embedding and the anchor's."""
    layout = spec.layout
    anchor = layout.center if anchor is None else tuple(anchor)
    z = _embed_cells(model, spec, quantized)
    ref = z[anchor[0] * layout.width + anchor[1]]
    return np.sqrt(((z - ref) ** 2).sum(axis=1)).reshape(layout.height, layout.width)


def export_embeddings(model, spec: EnvSpec, path, states=None) -> np.ndarray:
    """Write one row per state: cell id, G code indices, then the m values of z_q."""
    layout = spec.layout
    states = layout.cells() if states is None else [tuple(s) for s in states]
    obs = np.stack([render(MazeState(cell, None, 0, 0), spec) for cell in states])
    emb = model.embed(obs)
    z = emb.z.data
    codes = emb.codes if emb.codes is not None else np.zeros((len(states), 0), dtype=np.int64)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell"] + [f"code{g}" for g in range(codes.shape[1])] + [f"z{i}" for i in range(z.shape[1])])
        for cell, c, row in zip(states, codes, z):
            w.writerow([cell[0] * layout.width + cell[1]] + [int(x) for x in c] + [f"{x:.9g}" for x in row])
    return z


def read_embeddings(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    n_codes = sum(1 for h in header if h.startswith("code"))
    cells = np.array([int(r[0]) for r in rows])
    codes = np.array([[int(x) for x in r[1:1 + n_codes]] for r in rows], dtype=np.int64).reshape(len(rows), n_codes)
    z = np.array([[float(x) for x in r[1 + n_codes:]] for r in rows])
    return cells, codes, z


def write_matrix_csv(matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [f"col{c}" for c in range(matrix.shape[1])])
        for r, values in enumerate(matrix):
            w.writerow([r] + [repr(float(v)) for v in values])


def read_matrix_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(x) for x in r[1:]] for r in rows])
