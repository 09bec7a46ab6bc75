"""Geometry of product latent spaces built from circles and real lines.

Points are plain numpy arrays whose last axis runs over the factors of a
:class:`LatentTopology`. Circular coordinates live in ``[0, 2*pi)``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegenerateDirectionError, InvalidValueError, ShapeError

TWO_PI = 2.0 * np.pi
CIRCULAR = "circular"
EUCLIDEAN = "euclidean"
ALIGN_GRID = 720


@dataclass(frozen=True)
class LatentTopology:
    """Ordered product of circular (period 2*pi) and Euclidean factors."""

    factors: tuple[str, ...]

    def __post_init__(self):
        factors = tuple(self.factors)
        if len(factors) < 1:
            raise ShapeError("a topology needs at least one factor")
        for f in factors:
            if f not in (CIRCULAR, EUCLIDEAN):
                raise ValueError(f"unknown factor kind {f!r}")
        object.__setattr__(self, "factors", factors)

    @classmethod
    def circle(cls) -> "LatentTopology":
        return cls((CIRCULAR,))

    @classmethod
    def torus(cls, n: int) -> "LatentTopology":
        return cls((CIRCULAR,) * n)

    @classmethod
    def euclidean(cls, n: int) -> "LatentTopology":
        return cls((EUCLIDEAN,) * n)

    @classmethod
    def parse(cls, spec: str) -> "LatentTopology":
        """Parse shorthands such as ``S1``, ``T2``, ``R2`` or ``S1xR1``."""
        factors: list[str] = []
        for part in spec.replace("*", "x").split("x"):
            part = part.strip().upper()
            if not part:
                continue
            kind, n = part[0], int(part[1:] or 1)
            if kind in ("S", "T"):
                if kind == "S" and n != 1:
                    raise ValueError("only S1 spheres are supported")
                factors += [CIRCULAR] * n
            elif kind == "R":
                factors += [EUCLIDEAN] * n
            else:
                raise ValueError(f"cannot parse topology {spec!r}")
        return cls(tuple(factors))

    @property
    def total_dim(self) -> int:
        return len(self.factors)

    @property
    def circular_mask(self) -> np.ndarray:
        return np.array([f == CIRCULAR for f in self.factors])

    def __add__(self, other: "LatentTopology") -> "LatentTopology":
        return LatentTopology(self.factors + other.factors)

    def to_dict(self) -> dict:
        return {"factors": list(self.factors)}

    @classmethod
    def from_dict(cls, d: dict) -> "LatentTopology":
        return cls(tuple(d["factors"]))

    def __str__(self) -> str:
        n_c = sum(f == CIRCULAR for f in self.factors)
        if n_c == self.total_dim:
            return "S1" if n_c == 1 else f"T{n_c}"
        if n_c == 0:
            return f"R{self.total_dim}"
        return "x".join("S1" if f == CIRCULAR else "R1" for f in self.factors)


def _check_points(p, topo: LatentTopology) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] != topo.total_dim:
        raise ShapeError(f"points with trailing dim {p.shape[-1:]} do not match topology of dim {topo.total_dim}")
    return p


def wrap(p, topo: LatentTopology) -> np.ndarray:
    """Reduce circular coordinates into [0, 2*pi); Euclidean ones pass through."""
    p = _check_points(p, topo)
    if not np.all(np.isfinite(p)):
        raise InvalidValueError("cannot wrap non-finite coordinates")
    out = p.copy()
    mask = topo.circular_mask
    c = np.mod(out[..., mask], TWO_PI)
    c[c >= TWO_PI] = 0.0
    out[..., mask] = c
    return out


def factor_distances(a, b, topo: LatentTopology) -> np.ndarray:
    """Per-factor geodesic distances, same shape as the broadcast inputs."""
    a = _check_points(a, topo)
    b = _check_points(b, topo)
    d = np.abs(a - b)
    mask = topo.circular_mask
    if mask.any():
        dc = np.mod(d[..., mask], TWO_PI)
        d[..., mask] = np.minimum(dc, TWO_PI - dc)
    return d


def geodesic_distance(a, b, topo: LatentTopology) -> np.ndarray:
    """Flat product-metric distance: L2 norm of per-factor geodesics."""
    d = factor_distances(a, b, topo)
    return np.sqrt((d * d).sum(axis=-1))


def angle_from_vector(v, eps: float = 1e-8) -> np.ndarray:
    """Angle in [0, 2*pi) of the direction of ``v`` (last axis of length 2)."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 2:
        raise ShapeError("angle_from_vector needs 2-vectors")
    norm = np.sqrt((v * v).sum(axis=-1))
    if np.any(norm <= eps):
        raise DegenerateDirectionError(f"direction norm <= {eps}")
    u = v / norm[..., None]
    ang = np.mod(np.arctan2(u[..., 1], u[..., 0]), TWO_PI)
    return np.where(ang >= TWO_PI, 0.0, ang)


def _align_circular(ref: np.ndarray, cand: np.ndarray, n_grid: int) -> tuple[np.ndarray, dict, float]:
    offsets = np.arange(n_grid) * (TWO_PI / n_grid)
    best = (np.inf, 1, 0.0)
    for sign in (1, -1):
        # (T, n_grid) distance table
        d = np.abs(np.mod(sign * cand[:, None] + offsets[None, :] - ref[:, None], TWO_PI))
        err = np.minimum(d, TWO_PI - d).mean(axis=0)
        i = int(np.argmin(err))
        if err[i] < best[0]:
            best = (float(err[i]), sign, float(offsets[i]))
    err, sign, off = best
    aligned = np.mod(sign * cand + off, TWO_PI)
    aligned[aligned >= TWO_PI] = 0.0
    return aligned, {"kind": CIRCULAR, "sign": sign, "offset": off}, err


def _align_euclidean(ref: np.ndarray, cand: np.ndarray) -> tuple[np.ndarray, dict, float]:
    best = None
    for sign in (1, -1):
        shift = float(np.mean(ref - sign * cand)) if len(ref) else 0.0
        al = sign * cand + shift
        err = float(np.mean(np.abs(al - ref))) if len(ref) else 0.0
        if best is None or err < best[2]:
            best = (al, {"kind": EUCLIDEAN, "sign": sign, "offset": shift}, err)
    return best


def _align_block(ref: np.ndarray, cand: np.ndarray, topo: LatentTopology, n_grid: int):
    out = np.empty_like(cand)
    transforms = []
    total = 0.0
    for f, kind in enumerate(topo.factors):
        if kind == CIRCULAR:
            al, tr, err = _align_circular(ref[:, f], cand[:, f], n_grid)
        else:
            al, tr, err = _align_euclidean(ref[:, f], cand[:, f])
        out[:, f] = al
        transforms.append(tr)
        total += err
    return out, transforms, total


def align_trajectories(
    reference,
    candidate,
    topo: LatentTopology,
    spaces: list[LatentTopology] | None = None,
    n_grid: int = ALIGN_GRID,
) -> tuple[np.ndarray, dict]:
    """Map ``candidate`` through the isometry that best matches ``reference``.

    Circular factors search reflections and ``n_grid`` rotation offsets;
    Euclidean factors search a sign flip with the mean-difference shift.
    When ``spaces`` splits ``topo`` into several latent spaces, spaces with
    identical topology are additionally permuted (brute force, at most 4).

    Returns the aligned trajectory and a record of the chosen transform.
    """
    ref = _check_points(reference, topo)
    cand = _check_points(candidate, topo)
    if ref.shape != cand.shape:
        raise ShapeError(f"trajectory shapes differ: {ref.shape} vs {cand.shape}")
    ref = ref.reshape(-1, topo.total_dim)
    cand = cand.reshape(-1, topo.total_dim)
    if spaces is None:
        spaces = [topo]
    if sum(s.total_dim for s in spaces) != topo.total_dim:
        raise ShapeError("latent spaces do not tile the topology")
    if len(spaces) > 4:
        raise ShapeError("permutation search supports at most 4 latent spaces")
    bounds = np.cumsum([0] + [s.total_dim for s in spaces])
    sl = [slice(bounds[i], bounds[i + 1]) for i in range(len(spaces))]

    cache = {}

    def pair(i, j):
        if (i, j) not in cache:
            cache[(i, j)] = _align_block(ref[:, sl[i]], cand[:, sl[j]], spaces[i], n_grid)
        return cache[(i, j)]

    best = None
    for perm in itertools.permutations(range(len(spaces))):
        if any(spaces[i] != spaces[j] for i, j in enumerate(perm)):
            continue
        total = sum(pair(i, j)[2] for i, j in enumerate(perm))
        if best is None or total < best[0] - 1e-15:
            best = (total, perm)
    _, perm = best
    aligned = np.empty_like(cand)
    factors = []
    for i, j in enumerate(perm):
        al, tr, _ = pair(i, j)
        aligned[:, sl[i]] = al
        factors.extend(tr)
    return aligned.reshape(np.shape(candidate)), {"permutation": list(perm), "factors": factors}


def save_trajectory_csv(path, traj) -> None:
    """One row per time bin, one column per factor, header ``dim_0,...``."""
    traj = np.atleast_2d(np.asarray(traj, dtype=np.float64))
    if traj.ndim != 2:
        raise ShapeError("trajectory must be 2-D (bins x factors)")
    header = ",".join(f"dim_{i}" for i in range(traj.shape[1]))
    with open(path, "w", newline="\n") as fh:
        fh.write(header + "\n")
        for row in traj:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_trajectory_csv(path) -> np.ndarray:
    from .errors import FormatError

    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith("dim_0"):
        raise FormatError(f"{path}: missing 'dim_0,...' header")
    n = len(text[0].split(","))
    rows = []
    for k, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != n:
            raise FormatError(f"{path}:{k}: expected {n} columns")
        try:
            rows.append([float(x) for x in parts])
        except ValueError as exc:
            raise FormatError(f"{path}:{k}: {exc}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, n)
