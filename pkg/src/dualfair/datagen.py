"""Synthetic patch-grid data with a controllable target/sensitive shortcut and domain shift."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ParseError, SchemaError, SpecError


@dataclass
class DataSpec:
    n: int = 1000
    n_patches: int = 16
    d_patch: int = 8
    rho: float = 0.9                 # P(a == y)
    noise: float = 2.0
    target_scale: float = 1.0
    sensitive_scale: float = 1.0
    p_y: float = 0.5
    rotation_deg: float = 20.0
    offset: float = 0.5
    seed: int = 0                    # sample noise and labels
    world_seed: int = 0              # signal directions and the shift transform
    target_dirs: np.ndarray | None = None      # (2, d_patch)
    sensitive_dirs: np.ndarray | None = None   # (2, d_patch)

    def validate(self):
        if not 0.0 <= self.rho <= 1.0:
            raise SpecError(f"rho must lie in [0, 1], got {self.rho}")
        if not 0.0 <= self.p_y <= 1.0:
            raise SpecError(f"p_y must lie in [0, 1], got {self.p_y}")
        if self.n < 1 or self.n_patches < 1 or self.d_patch < 1:
            raise SpecError("n, n_patches and d_patch must be positive")
        if self.noise < 0:
            raise SpecError("noise must be non-negative")
        if self.target_dirs is None and self.d_patch < 4:
            raise SpecError("need d_patch >= 4 to draw four orthogonal signal directions")
        for name in ("target_dirs", "sensitive_dirs"):
            dirs = getattr(self, name)
            if dirs is not None:
                dirs = np.asarray(dirs, dtype=np.float64)
                if dirs.shape != (2, self.d_patch):
                    raise SpecError(f"{name} must have shape (2, {self.d_patch})")
                if np.any(np.linalg.norm(dirs, axis=1) == 0):
                    raise SpecError(f"{name} contains a zero-norm direction")
        return self

    def directions(self):
        """Target and sensitive directions; drawn mutually orthonormal unless given."""
        if self.target_dirs is not None and self.sensitive_dirs is not None:
            return (np.asarray(self.target_dirs, dtype=np.float64),
                    np.asarray(self.sensitive_dirs, dtype=np.float64))
        rng = np.random.default_rng([self.world_seed, 11])
        q, _ = np.linalg.qr(rng.normal(size=(self.d_patch, 4)))
        t, s = q.T[:2], q.T[2:]
        if self.target_dirs is not None:
            t = np.asarray(self.target_dirs, dtype=np.float64)
        if self.sensitive_dirs is not None:
            s = np.asarray(self.sensitive_dirs, dtype=np.float64)
        return t, s

    def shift_transform(self):
        """(R, offset) with R a rotation by ``rotation_deg`` in a seeded random plane."""
        rng = np.random.default_rng([self.world_seed, 12])
        d = self.d_patch
        q, _ = np.linalg.qr(rng.normal(size=(d, 3)))
        u, v, w = q.T
        th = np.deg2rad(self.rotation_deg)
        R = (np.eye(d) + (np.cos(th) - 1.0) * (np.outer(u, u) + np.outer(v, v))
             + np.sin(th) * (np.outer(u, v) - np.outer(v, u)))
        return R, self.offset * w


@dataclass
class Dataset:
    patches: np.ndarray     # (N, M, d_patch)
    y: np.ndarray
    a: np.ndarray
    domain: np.ndarray
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        self.a = np.asarray(self.a, dtype=np.int64)
        self.domain = np.asarray(self.domain, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.y), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def __len__(self):
        return len(self.y)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.patches[idx], self.y[idx], self.a[idx], self.domain[idx], self.ids[idx])

    def sample(self, i: int):
        from .encoders import ImageInput
        return ImageInput(self.patches[i], int(self.y[i]), int(self.a[i]), int(self.domain[i]), int(self.ids[i]))


def generate(spec: DataSpec) -> Dataset:
    spec.validate()
    t_dirs, s_dirs = spec.directions()
    rng = np.random.default_rng([spec.seed, 13])
    y = (rng.random(spec.n) < spec.p_y).astype(np.int64)
    agree = rng.random(spec.n) < spec.rho
    a = np.where(agree, y, 1 - y)
    signal = spec.target_scale * t_dirs[y] + spec.sensitive_scale * s_dirs[a]      # (N, d)
    noise = rng.normal(size=(spec.n, spec.n_patches, spec.d_patch)) * spec.noise
    patches = signal[:, None, :] + noise
    return Dataset(patches, y, a, np.zeros(spec.n, dtype=np.int64))


def shift_domain(ds: Dataset, spec: DataSpec) -> Dataset:
    R, off = spec.shift_transform()
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(off))):
        raise SpecError("non-finite shift transform")
    return Dataset(ds.patches @ R + off, ds.y.copy(), ds.a.copy(), ds.domain + 1, ds.ids.copy())


def unshift_domain(ds: Dataset, spec: DataSpec) -> Dataset:
    R, off = spec.shift_transform()
    return Dataset((ds.patches - off) @ R.T, ds.y.copy(), ds.a.copy(), ds.domain - 1, ds.ids.copy())


def split(ds: Dataset, fractions=(0.7, 0.1, 0.2), seed: int = 0):
    """Seeded shuffle then contiguous train/val/test cut."""
    perm = np.random.default_rng([seed, 14]).permutation(len(ds))
    n_tr = int(round(fractions[0] * len(ds)))
    n_va = int(round(fractions[1] * len(ds)))
    return ds.subset(perm[:n_tr]), ds.subset(perm[n_tr:n_tr + n_va]), ds.subset(perm[n_tr + n_va:])


def subsample(ds: Dataset, ratio: float, seed: int = 0) -> Dataset:
    if not 0 < ratio <= 1:
        raise SpecError(f"ratio must lie in (0, 1], got {ratio}")
    if ratio == 1.0:
        return ds
    k = max(1, int(round(ratio * len(ds))))
    idx = np.sort(np.random.default_rng([seed, 15]).choice(len(ds), size=k, replace=False))
    return ds.subset(idx)


def corr(y, a) -> float:
    y, a = np.asarray(y, float), np.asarray(a, float)
    if y.std() == 0 or a.std() == 0:
        return float("nan")
    return float(np.corrcoef(y, a)[0, 1])


# -- CSV ------------------------------------------------------------------------

def _header(n_values: int):
    return ["id", "y", "a", "domain"] + [f"p{i}" for i in range(n_values)]


def save_csv(ds: Dataset, path):
    n, m, d = ds.patches.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_header(m * d))
        for i in range(n):
            w.writerow([int(ds.ids[i]), int(ds.y[i]), int(ds.a[i]), int(ds.domain[i])]
                       + [repr(float(v)) for v in ds.patches[i].reshape(-1)])


def load_csv(path, n_patches: int = 16) -> Dataset:
    with open(path, newline="") as fh:
        rows = csv.reader(fh)
        try:
            header = next(rows)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        n_values = len(header) - 4
        if n_values <= 0 or header != _header(n_values):
            raise SchemaError(f"{path}: unexpected header; want id,y,a,domain,p0..p<k>")
        if n_values % n_patches:
            raise SchemaError(f"{path}: {n_values} patch values do not split into {n_patches} patches")
        ids, ys, as_, doms, vals = [], [], [], [], []
        for lineno, row in enumerate(rows, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} fields, got {len(row)}", lineno)
            try:
                ids.append(int(row[0]))
                ys.append(int(row[1]))
                as_.append(int(row[2]))
                doms.append(int(row[3]))
                vals.append([float(v) for v in row[4:]])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
    if not ids:
        raise ParseError(f"{path}: no data rows", 2)
    patches = np.array(vals).reshape(len(ids), n_patches, n_values // n_patches)
    return Dataset(patches, ys, as_, doms, ids)


def with_overrides(spec: DataSpec, **kw) -> DataSpec:
    return replace(spec, **kw)
