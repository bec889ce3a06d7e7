#!/usr/bin/env python3
"""Per-subcarrier bidding with water-filling power.

Every single-hop policy in this package solves the same per-subcarrier
problem: link l bids X = w_l log2(1 + |H|^2 p) - c_l p with the water-filling
power p = (w_l / c_l - 1/|H|^2)+, and the subcarrier goes to the best bid.
Only the weight w and the price c differ between policies.
"""

from typing import Optional, Tuple

import numpy as np

from model_core import Action
from sim_errors import ContractViolationError

__all__ = ['water_level', 'water_filling_power', 'bid_matrix', 'assign_max_bids',
           'assign_min_bids']


def water_level(weight: np.ndarray, price: np.ndarray) -> np.ndarray:
    """
    Water level w / c per link.

    Args:
        weight: nonnegative per-link weights
        price: nonnegative per-link power prices

    Returns:
        np.ndarray: the level, 0 wherever the weight is 0
    """
    weight = np.asarray(weight, dtype=np.float64)
    price = np.broadcast_to(np.asarray(price, dtype=np.float64), weight.shape)
    if np.any((weight > 0) & (price <= 0)):
        raise ContractViolationError("a positive weight needs a positive power price")
    return np.divide(weight, price, out=np.zeros_like(weight), where=weight > 0)


def water_filling_power(level: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """(level - 1/|H|^2)+ for every (link, subcarrier); zero gain gets zero power."""
    gains = np.asarray(gains, dtype=np.float64)
    inverse = np.divide(1.0, gains, out=np.full_like(gains, np.inf), where=gains > 0)
    return np.maximum(np.asarray(level, dtype=np.float64)[:, None] - inverse, 0.0)


def bid_matrix(weight: np.ndarray, price: np.ndarray,
               gains: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Bids X[l, m] and the water-filling powers they were computed with.

    Args:
        weight: per-link rate weight, shape (L,)
        price: per-link power price, shape (L,)
        gains: gain powers |H|^2, shape (L, M)

    Returns:
        (bids, powers), both shaped (L, M)
    """
    weight = np.asarray(weight, dtype=np.float64)
    price = np.broadcast_to(np.asarray(price, dtype=np.float64), weight.shape)
    powers = water_filling_power(water_level(weight, price), gains)
    bids = weight[:, None] * np.log2(1.0 + gains * powers) - price[:, None] * powers
    return bids, powers


def assign_max_bids(bids: np.ndarray, powers: np.ndarray) -> Action:
    """Give each subcarrier to the highest bid if it is positive; ties go to the lowest link."""
    n_links, n_sub = bids.shape
    winners = np.argmax(bids, axis=0)
    active = bids[winners, np.arange(n_sub)] > 0
    s = np.zeros((n_links, n_sub), dtype=bool)
    s[winners[active], np.arange(n_sub)[active]] = True
    return Action(s, np.where(s, powers, 0.0))


def assign_min_bids(bids: np.ndarray, powers: np.ndarray,
                    eligible: Optional[np.ndarray] = None) -> Action:
    """Give each subcarrier to the lowest bid among eligible links; ties go to the lowest link."""
    n_links, n_sub = bids.shape
    if eligible is None:
        eligible = np.ones(n_links, dtype=bool)
    s = np.zeros((n_links, n_sub), dtype=bool)
    if not np.any(eligible):
        return Action(s, np.zeros((n_links, n_sub)))
    masked = np.where(np.asarray(eligible)[:, None], bids, np.inf)
    winners = np.argmin(masked, axis=0)
    s[winners, np.arange(n_sub)] = True
    return Action(s, np.where(s, powers, 0.0))
