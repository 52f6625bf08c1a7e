"""Rolling trajectory window and forgetting-factor WLS sensitivity estimation."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, InsufficientData, ParameterError, SingularError

EXCITATION_RTOL = 1e-8


class TrajectoryWindow:
    """Ring buffer of (u, y) samples; consecutive pairs define the increments.

    Holds at most tau + 1 samples so that up to tau increments are available.
    """

    def __init__(self, dim: int, tau: int, lambda_ff: float):
        if tau < 1:
            raise ParameterError("window length tau must be >= 1")
        if not (0.0 < lambda_ff < 1.0):
            raise ParameterError("forgetting factor must lie strictly inside (0, 1)")
        self.dim = dim
        self.tau = tau
        self.lambda_ff = lambda_ff
        self._samples: deque[tuple[np.ndarray, np.ndarray]] = deque(maxlen=tau + 1)

    def __len__(self) -> int:
        return len(self._samples)

    @property
    def n_increments(self) -> int:
        return max(0, len(self._samples) - 1)

    def push(self, u: np.ndarray, y: np.ndarray) -> None:
        u = np.asarray(u, dtype=float)
        y = np.asarray(y, dtype=float)
        if u.shape != (self.dim,) or y.shape != (self.dim,):
            raise DimensionError(f"sample sized ({u.shape}, {y.shape}), window dimension {self.dim}")
        self._samples.append((u.copy(), y.copy()))

    def increments(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked first differences, oldest row first: (U, Y) with rows du_l, dy_l."""
        if len(self._samples) < 2:
            raise InsufficientData("need at least 2 samples to form increments")
        us = np.array([s[0] for s in self._samples])
        ys = np.array([s[1] for s in self._samples])
        return np.diff(us, axis=0), np.diff(ys, axis=0)

    def shift_history(self, delta_y: np.ndarray) -> None:
        """Add a common offset to every stored output sample.

        Differences within the stored history are unchanged; only the
        increment that will bridge to the next pushed sample is affected.
        Used to keep the window consistent across a detected load event so
        the event's output jump is not attributed to the control step.
        """
        delta_y = np.asarray(delta_y, dtype=float)
        if delta_y.shape != (self.dim,):
            raise DimensionError(f"offset sized {delta_y.shape}, window dimension {self.dim}")
        shifted = deque(maxlen=self._samples.maxlen)
        for u, y in self._samples:
            shifted.append((u, y + delta_y))
        self._samples = shifted

    def radius(self) -> float:
        """Max distance of any stored (u, y) sample from the newest one."""
        if len(self._samples) == 0:
            return 0.0
        u_new, y_new = self._samples[-1]
        return max(
            float(np.hypot(np.linalg.norm(u - u_new), np.linalg.norm(y - y_new)))
            for u, y in self._samples
        )

    def snapshot(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(u.copy(), y.copy()) for u, y in self._samples]


@dataclass(frozen=True)
class SensitivityEstimate:
    """WLS estimate of the voltage response to injection changes."""

    matrix: np.ndarray  # dy approx matrix @ du
    sigma_min: float
    excited: bool
    window_radius: float
    sigma_ratio: float = 0.0  # sigma_min / sigma_max of the increment matrix


def forgetting_weights(tau: int, lambda_ff: float) -> np.ndarray:
    """Diagonal of the forgetting weight matrix: oldest lambda^(tau-1), newest 1."""
    if tau < 1:
        raise ParameterError("tau must be >= 1")
    if not (0.0 < lambda_ff <= 1.0):
        raise ParameterError("forgetting factor must lie in (0, 1]")
    return lambda_ff ** np.arange(tau - 1, -1, -1, dtype=float)


def estimate_sensitivity(
    U: np.ndarray,
    Y: np.ndarray,
    weights: np.ndarray,
    excitation_rtol: float = EXCITATION_RTOL,
    window_radius: float = 0.0,
) -> SensitivityEstimate:
    """Solve the weighted least-squares fit Y ~ U S^T.

    Uses a QR factorization of sqrt(W) U rather than the explicit normal
    equations. When U is rank deficient (not sufficiently excited) the
    minimum-norm solution is returned with the excited flag cleared.
    """
    U = np.asarray(U, dtype=float)
    Y = np.asarray(Y, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if U.ndim != 2 or Y.ndim != 2 or U.shape[0] != Y.shape[0]:
        raise DimensionError("U and Y must be matrices with matching row counts")
    if weights.shape != (U.shape[0],):
        raise DimensionError("one weight per increment row required")

    sw = np.sqrt(weights)[:, None]
    Uw = sw * U
    Yw = sw * Y
    svals = np.linalg.svd(U, compute_uv=False)
    sigma_min = float(svals[-1]) if U.shape[0] >= U.shape[1] else 0.0
    sigma_max = float(svals[0]) if svals.size else 0.0
    excited = sigma_min > excitation_rtol * max(1.0, sigma_max)

    if excited:
        try:
            qmat, rmat = np.linalg.qr(Uw)
            s_t = np.linalg.solve(rmat, qmat.T @ Yw)
        except np.linalg.LinAlgError as exc:
            raise SingularError("factorization failed despite passing the excitation threshold") from exc
    else:
        s_t = np.linalg.lstsq(Uw, Yw, rcond=None)[0]

    return SensitivityEstimate(
        matrix=s_t.T,
        sigma_min=sigma_min,
        excited=bool(excited),
        window_radius=float(window_radius),
        sigma_ratio=float(sigma_min / sigma_max) if sigma_max > 0.0 else 0.0,
    )


def estimate_from_window(window: TrajectoryWindow, excitation_rtol: float = EXCITATION_RTOL) -> SensitivityEstimate:
    U, Y = window.increments()
    w = forgetting_weights(U.shape[0], window.lambda_ff)
    return estimate_sensitivity(U, Y, w, excitation_rtol=excitation_rtol, window_radius=window.radius())
