"""Kohn-Vogelius level-set shape reconstruction."""

from .kohn_vogelius import (
    DescentConfig,
    DescentRecord,
    DescentResult,
    DescentStepper,
    H1Smoother,
    KvState,
    MeasurementSet,
    StationaryInitialization,
    check_monotone,
    conductivity_from_levelset,
    directional_derivative,
    grid_velocity,
    kv_objective,
    kv_state,
    level_set_currents,
    levelset_reconstruct,
    make_measurements,
    narrow_band,
    shape_derivative,
    shape_gradient_velocity,
)
from .levelset import (
    CflError,
    Circle,
    Ellipse,
    LevelSetField,
    area_fraction,
    cfl_time_step,
    check_inside_unit_square,
    init_signed_distance,
    interface_nodes,
    reinitialize,
    transport_levelset,
)

__all__ = [name for name in dir() if not name.startswith("_")]
