"""Single nuclear-spin qubit in a cavity: simulation, readout, tomography, fitting."""

from .spin import (DOWN, MIXED, NO_RELAXATION, UP, DensityMatrix, FreeEvolution,
                   RelaxationParams, RFPulse, StepUnderflowError, apply_rotation, fidelity,
                   free_evolve, initialize_state, pure_state, purity, rf_pulse_propagate,
                   run_sequence, trace_distance)
from .readout import (IDEAL_READOUT, CavityParams, ReadoutParams, cavity_enhanced_linewidth,
                      click_probability, detection_efficiency, multi_atom_click_probability,
                      simulate_readout)
from .tomography import (MeasurementBasis, MeasurementRecord, MLEConvergenceError,
                         TomographyResult, bootstrap_errors, linear_inversion, mle_reconstruct,
                         tomography_report)
from .fitting import (Dataset, FitResult, fit_exponential, fit_sinusoid, least_squares,
                      visibility)
from .experiments import (ApparatusParams, ExperimentRun, LatticeParams, gamma_m_from,
                          operation_budget, run_rabi, run_ramsey, run_state_prep_tomography,
                          run_t1, run_t2, t2_relation, transport_displacement,
                          transport_peak_velocity, transport_profile)

__version__ = "0.1.0"
