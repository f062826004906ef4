"""Kinematic multi-lane traffic simulator with four scenario archetypes."""

from .engine import (
    ACCELERATE, ACTION_NAMES, ACTIONS, DECELERATE, KEEP, LANE_LEFT, LANE_RIGHT, N_ACTIONS, TrafficBatch,
)
from .scenario import (
    ARCHETYPES, REGIMES, ConfigurationError, RegimeSchedule, ScenarioConfig, default_scenario,
)
from .world import (
    DEFAULT_WINDOW_RADIUS, LaneGeometry, StepOutcome, VehicleState, WorldState, density_estimate,
    predict_costs, proximity_cost, reset, step,
)
