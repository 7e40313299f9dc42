"""Hourly reward bookkeeping shared by demonstrations, RL rollouts and evaluation."""

from __future__ import annotations


def market_profit(pi_f, F, pi_e, O) -> float:
    """pi_f*F - pi_e*O: FR capacity revenue minus energy purchase cost for one hour."""
    return float(pi_f * F - pi_e * O)


def fade_reward(pi_f, F, pi_e, O, Cf, Cf_next, pi_cf) -> float:
    """Profit less the price of the capacity fade incurred over the hour."""
    return float(pi_f * F - pi_e * O - pi_cf * (Cf_next - Cf))


def stage_reward(pi_f, F, pi_e, O, Cf, Cf_next, E_next, E_bar, pi_cf, soc_weight=5.0) -> float:
    """RL stage reward: fade-adjusted profit with a penalty on end-of-hour SOC
    away from half of the remaining capacity."""
    dev = E_next / E_bar - 0.5 * (1.0 - Cf)
    return float(pi_f * F - pi_e * O - pi_cf * (Cf_next - Cf) - soc_weight * dev * dev)
