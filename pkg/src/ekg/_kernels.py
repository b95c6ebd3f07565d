"""Compiled inner loops for the int8 screening pass of the vector index."""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _int8_scores_py(codes: np.ndarray, qcodes: np.ndarray) -> np.ndarray:
    return codes.astype(np.int32) @ qcodes.astype(np.int32)


if numba is not None:

    @numba.njit(cache=True, nogil=True)
    def int8_scores(codes, qcodes):
        n, d = codes.shape
        out = np.empty(n, np.int32)
        for i in range(n):
            acc = np.int32(0)
            for j in range(d):
                acc += np.int32(codes[i, j]) * np.int32(qcodes[j])
            out[i] = acc
        return out

else:  # pragma: no cover
    int8_scores = _int8_scores_py


def quantize_rows(unit: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Symmetric per-row int8 codes for unit rows.

    Returns ``(codes, scales, l1)`` with ``row ~= scale * codes`` and ``l1``
    the L1 norm of each code row.
    """
    amax = np.abs(unit).max(axis=1) if unit.size else np.zeros(unit.shape[0], np.float32)
    scales = np.where(amax > 0, amax / 127.0, 1.0).astype(np.float64)
    codes = np.empty(unit.shape, dtype=np.int8)
    l1 = np.zeros(unit.shape[0], dtype=np.float64)
    chunk = 8192
    for lo in range(0, unit.shape[0], chunk):
        block = np.clip(np.rint(unit[lo:lo + chunk] / scales[lo:lo + chunk, None]), -127, 127)
        codes[lo:lo + chunk] = block
        l1[lo:lo + chunk] = np.abs(block).sum(axis=1)
    return codes, scales, l1
