from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InputError


@dataclass(frozen=True)
class Dataset:
    """Observed multivariate series with its covariates.

    Parameters
    ----------
    y : (T, p) array
        Outcomes.
    x : (T, J) array
        Covariates entering the emission conditional mean.
    z : (T, L) array
        Covariates entering the dwell hazards.
    time : (T,) array, optional
        Time labels (integers or ISO dates as strings). Defaults to ``0..T-1``.
    """

    y: np.ndarray
    x: np.ndarray | None = None
    z: np.ndarray | None = None
    time: np.ndarray | None = None
    y_names: tuple = field(default=())
    x_names: tuple = field(default=())
    z_names: tuple = field(default=())

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if y.ndim != 2:
            raise InputError("y must be a (T, p) matrix")
        T = y.shape[0]
        x = np.zeros((T, 0)) if self.x is None else np.asarray(self.x, dtype=float)
        z = np.zeros((T, 0)) if self.z is None else np.asarray(self.z, dtype=float)
        if x.ndim == 1:
            x = x[:, None]
        if z.ndim == 1:
            z = z[:, None]
        for name, arr in (("y", y), ("x", x), ("z", z)):
            if arr.shape[0] != T:
                raise InputError(f"{name} has {arr.shape[0]} rows, expected {T}")
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise InputError(f"non-finite value in {name} at row {bad[0]}, column {bad[1]}")
        time = np.arange(T) if self.time is None else np.asarray(self.time)
        if time.shape != (T,):
            raise InputError("time index must have one entry per row")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "time", time)
        object.__setattr__(self, "y_names", tuple(self.y_names) or tuple(f"y{i + 1}" for i in range(y.shape[1])))
        object.__setattr__(self, "x_names", tuple(self.x_names) or tuple(f"x{i + 1}" for i in range(x.shape[1])))
        object.__setattr__(self, "z_names", tuple(self.z_names) or tuple(f"z{i + 1}" for i in range(z.shape[1])))

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def J(self) -> int:
        return self.x.shape[1]

    @property
    def L(self) -> int:
        return self.z.shape[1]

    def replace_y(self, y) -> "Dataset":
        return Dataset(y, self.x, self.z, self.time, self.y_names, self.x_names, self.z_names)
