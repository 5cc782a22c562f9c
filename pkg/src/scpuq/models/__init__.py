from .oligopoly import (
    OligopolyConfig,
    cost_ladder,
    cost_ladder_covariance,
    cournot_closed_form,
    duopoly,
    make_oligopoly,
)

__all__ = [
    "OligopolyConfig",
    "cost_ladder",
    "cost_ladder_covariance",
    "cournot_closed_form",
    "duopoly",
    "make_oligopoly",
]
