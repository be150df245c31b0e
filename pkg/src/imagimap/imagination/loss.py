"""Class-balancing weight matrices and the weighted cross-entropy loss."""

from __future__ import annotations

from typing import Tuple

import numpy as np

from ..errors import DimensionError, ParameterError
from .network import PROB_CLAMP


def _shape_check(*arrays):
    if len({np.shape(a) for a in arrays}) != 1:
        raise DimensionError(f"shape mismatch: {[np.shape(a) for a in arrays]}")


def compute_weight_alpha(v_label: np.ndarray, w_alpha_max: float = 30.0) -> Tuple[np.ndarray, float]:
    """Up-weight object cells by the inverse of their share of the window.

    Returns the per-cell map (``w_alpha - 1`` on label cells, 0 elsewhere)
    and the scalar ``w_alpha``.
    """
    v_label = np.asarray(v_label)
    support = v_label > 0
    w_alpha = min(v_label.size / (np.count_nonzero(support) + 1), w_alpha_max)
    return np.where(support, w_alpha - 1.0, 0.0), float(w_alpha)


def compute_weight_gamma(v_label: np.ndarray, seen_star: np.ndarray, w_gamma_max: float = 10.0,
                         denominator: str = "support") -> Tuple[np.ndarray, float]:
    """Up-weight empty cells around seen object cells.

    ``denominator="support"`` counts the cells that receive the weight
    (seen_star and empty label); ``"label"`` counts object cells instead.
    """
    v_label, seen_star = np.asarray(v_label), np.asarray(seen_star)
    _shape_check(v_label, seen_star)
    support = (seen_star > 0) & (v_label == 0)
    if denominator == "support":
        count = np.count_nonzero(support)
    elif denominator == "label":
        count = np.count_nonzero(v_label > 0)
    else:
        raise ParameterError(f"unknown gamma denominator {denominator!r}")
    w_gamma = min(v_label.size / (count + 1), w_gamma_max)
    return np.where(support, w_gamma - 1.0, 0.0), float(w_gamma)


def combine_weights(alpha_map: np.ndarray, gamma_map: np.ndarray) -> np.ndarray:
    _shape_check(alpha_map, gamma_map)
    return np.asarray(alpha_map) + np.asarray(gamma_map) + 1.0


def sample_weights(v_label, seen_star, w_alpha_max=30.0, w_gamma_max=10.0, denominator="support"):
    """Combined weight matrix for one sample plus its two scalars."""
    a_map, w_a = compute_weight_alpha(v_label, w_alpha_max)
    g_map, w_g = compute_weight_gamma(v_label, seen_star, w_gamma_max, denominator)
    return combine_weights(a_map, g_map), w_a, w_g


def weighted_bce(pred, v_label, weights) -> float:
    """Sum over cells of ``-W * (y log p + (1 - y) log(1 - p))``."""
    pred, v_label, weights = np.asarray(pred, np.float64), np.asarray(v_label, np.float64), np.asarray(weights)
    _shape_check(pred, v_label, weights)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-(weights * (v_label * np.log(p) + (1.0 - v_label) * np.log(1.0 - p))).sum())


def weighted_bce_grad(pred, v_label, weights) -> np.ndarray:
    """``dL/dp`` for :func:`weighted_bce`, zero where the clamp is active."""
    pred = np.asarray(pred, np.float64)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = weights * (-(v_label / p) + (1.0 - v_label) / (1.0 - p))
    return np.where(p == pred, g, 0.0)
