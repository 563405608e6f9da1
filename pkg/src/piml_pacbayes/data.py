"""Collocation/observation sampling, role splits and CSV persistence."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import rng_for
from .errors import ContractError, ParseError
from .pde import analytic_solution, get_benchmark

SPLITS = ("prior", "calibration", "posterior", "test")


@dataclass(frozen=True)
class TaskDataset:
    """Samples for one loss term; rows are ``(x, t)`` or ``(x, t, y)``."""

    benchmark: str
    loss_id: str
    seed: int
    samples: np.ndarray
    bounds: tuple  # cumulative split boundaries, len(SPLITS) + 1
    label_noise: float = 0.0

    def __post_init__(self):
        arr = np.array(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            arr = arr.reshape(0, 3 if self.loss_id == "d" else 2)
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)
        bounds = tuple(int(b) for b in self.bounds)
        if len(bounds) != len(SPLITS) + 1 or bounds[0] != 0 or list(bounds) != sorted(bounds):
            raise ContractError(f"bad split boundaries {bounds}")
        if bounds[-1] != len(arr):
            raise ContractError(f"splits cover {bounds[-1]} rows but dataset has {len(arr)}")
        object.__setattr__(self, "bounds", bounds)

    @property
    def sizes(self) -> dict:
        return {name: self.bounds[i + 1] - self.bounds[i] for i, name in enumerate(SPLITS)}

    def split(self, name: str, limit: int | None = None) -> np.ndarray:
        """Rows of one split; ``limit`` keeps only the first rows (unbalanced runs)."""
        i = SPLITS.index(name)
        rows = self.samples[self.bounds[i] : self.bounds[i + 1]]
        return rows if limit is None else rows[:limit]

    def __eq__(self, other):
        if not isinstance(other, TaskDataset):
            return NotImplemented
        return (
            (self.benchmark, self.loss_id, self.seed, self.bounds, self.label_noise)
            == (other.benchmark, other.loss_id, other.seed, other.bounds, other.label_noise)
            and self.samples.shape == other.samples.shape
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


def _as_sizes(sizes) -> tuple:
    if isinstance(sizes, dict):
        sizes = tuple(int(sizes.get(k, 0)) for k in SPLITS)
    sizes = tuple(int(s) for s in sizes)
    if len(sizes) != len(SPLITS) or any(s < 0 for s in sizes):
        raise ContractError(f"need four non-negative split sizes, got {sizes}")
    return sizes


def sample_region(benchmark, region: str, n: int, rng: np.random.Generator) -> np.ndarray:
    b = get_benchmark(benchmark)
    (x0, x1), (t0, t1) = b.x_range, b.t_range
    x = rng.uniform(x0, x1, n)
    t = rng.uniform(t0, t1, n)
    if region == "interior":
        return np.column_stack([x, t])
    if region == "initial":
        return np.column_stack([x, np.full(n, t0)])
    if region in ("left", "periodic"):
        return np.column_stack([np.full(n, x0), t])
    if region == "right":
        return np.column_stack([np.full(n, x1), t])
    raise ContractError(f"unknown region {region!r}")


def generate(benchmark, loss_id: str, sizes, seed: int, label_noise: float = 0.0) -> TaskDataset:
    """Uniform i.i.d. samples on the loss's region, split in fixed order."""
    b = get_benchmark(benchmark)
    spec = b.loss(loss_id)
    sizes = _as_sizes(sizes)
    n = sum(sizes)
    rng = rng_for(seed, b.name, loss_id, "samples")
    pts = sample_region(b, spec.region, n, rng)
    if loss_id == "d":
        y = analytic_solution(b, pts[:, 0], pts[:, 1])
        if label_noise > 0:
            y = y + label_noise * rng_for(seed, b.name, "d", "noise").standard_normal(n)
        pts = np.column_stack([pts, y])
    bounds = tuple(np.concatenate([[0], np.cumsum(sizes)]).astype(int))
    return TaskDataset(b.name, loss_id, int(seed), pts, bounds, float(label_noise))


def generate_all(benchmark, sizes: dict, seed: int, label_noise: float = 0.0) -> dict:
    """One dataset per loss; ``sizes`` maps loss id (or ``"physics"``) to split sizes."""
    b = get_benchmark(benchmark)
    out = {}
    for lid in b.loss_ids:
        s = sizes.get(lid, sizes.get("physics"))
        out[lid] = generate(b, lid, s, seed, label_noise if lid == "d" else 0.0)
    return out


# --------------------------------------------------------------------------
# CSV: "# benchmark=...,loss_id=...,seed=...,splits=a:b:c:d:e" then "x,t[,y]" rows


def save(dataset: TaskDataset, path, extra: dict | None = None) -> None:
    """Write the dataset; ``extra`` key/value pairs are appended to the header line."""
    cols = "x,t,y" if dataset.samples.shape[1] == 3 else "x,t"
    header = (
        f"# benchmark={dataset.benchmark},loss_id={dataset.loss_id},seed={dataset.seed},"
        f"splits={':'.join(str(b) for b in dataset.bounds)},label_noise={dataset.label_noise!r}"
    )
    for k, v in (extra or {}).items():
        header += f",{k}={v}"
    lines = [header, cols]
    lines.extend(",".join(f"{v:.17g}" for v in row) for row in dataset.samples)
    Path(path).write_text("\n".join(lines) + "\n")


def load(path) -> TaskDataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("# "):
        raise ParseError("missing '# benchmark,...' header", line=1)
    meta = {}
    for item in text[0][2:].split(","):
        if "=" not in item:
            raise ParseError(f"malformed header field {item!r}", line=1)
        k, v = item.split("=", 1)
        meta[k.strip()] = v.strip()
    for key in ("benchmark", "loss_id", "seed", "splits"):
        if key not in meta:
            raise ParseError(f"header lacks {key!r}", line=1)
    try:
        bounds = tuple(int(v) for v in meta["splits"].split(":"))
        seed = int(meta["seed"])
        noise = float(meta.get("label_noise", "0.0"))
    except ValueError as exc:
        raise ParseError(f"bad header value: {exc}", line=1) from None
    if len(text) < 2:
        raise ParseError("missing column line", line=2)
    cols = text[1].split(",")
    width = len(cols)
    if cols[:2] != ["x", "t"] or width not in (2, 3):
        raise ParseError(f"unexpected columns {text[1]!r}", line=2)
    rows = []
    for lineno, line in enumerate(text[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise ParseError(f"expected {width} fields, got {len(parts)}", line=lineno)
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", line=lineno) from None
    if len(rows) != bounds[-1]:
        raise ParseError(
            f"header declares {bounds[-1]} rows but file has {len(rows)} (truncated?)",
            line=len(text) + 1,
        )
    arr = np.array(rows, dtype=np.float64).reshape(len(rows), width)
    return TaskDataset(meta["benchmark"], meta["loss_id"], seed, arr, bounds, noise)
