from .ablation import AblationConfig, ablate, team_game
from .cournot import CournotParams, best_response_dynamics, cournot_game
from .nav import NavParams, nav_game
from .routing import RoutingNet, braess_network, flow_equilibrium, load_network, random_layered_network, routing_game

__all__ = [
    "AblationConfig",
    "CournotParams",
    "NavParams",
    "RoutingNet",
    "ablate",
    "best_response_dynamics",
    "braess_network",
    "cournot_game",
    "flow_equilibrium",
    "load_network",
    "nav_game",
    "random_layered_network",
    "routing_game",
    "team_game",
]
