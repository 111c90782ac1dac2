from dhpstrack.analysis.alg5 import Alg5Bound, alg5_bound
from dhpstrack.analysis.occupancy import OccupancyDP, empty_bins_table, mu_r_pmf, occupancy_pmf
from dhpstrack.analysis.phase1 import (
    expected_new_unique,
    optimal_batch_size,
    phase1_stop_distribution,
    simulate_phase1_iterations,
)
from dhpstrack.analysis.phase2 import (
    Phase2Tables,
    analyse_population,
    low_T_check,
    low_T_special_case,
    nstar_table,
    phase2_stop_distribution,
    pld,
    pstar_for_population,
    simulate_population_ids,
    tables_for_population,
)

__all__ = [
    "Alg5Bound",
    "OccupancyDP",
    "Phase2Tables",
    "alg5_bound",
    "analyse_population",
    "empty_bins_table",
    "expected_new_unique",
    "low_T_check",
    "low_T_special_case",
    "mu_r_pmf",
    "nstar_table",
    "occupancy_pmf",
    "optimal_batch_size",
    "phase1_stop_distribution",
    "phase2_stop_distribution",
    "pld",
    "pstar_for_population",
    "simulate_phase1_iterations",
    "simulate_population_ids",
    "tables_for_population",
]
