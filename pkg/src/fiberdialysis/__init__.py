"""Forward and inverse modeling of solute transport in hollow-fiber dialyzers."""

from .mesh import (AxiGeometry, Boundary, Mesh, Subdomain, boundary_vertices,
                   build_structured_mesh)
from .linalg import SparseMatrix, assemble_from_triplets, solve_linear
from .flow import (HydraulicState, VelocityField, calibrate_hydraulics,
                   compute_velocity_field, solve_membrane_pressure, transmembrane_flux)
from .transport import (BoundaryData, ConcentrationField, NewtonResult, ReactionParams,
                        SpeciesConfig, TransportConfig, TransportSolver,
                        assemble_newton_system, export_field_csv, newton_solve,
                        outlet_concentration, reaction_jacobian, reaction_source)
from .optim import (GridResult, OptimResult, fd_gradient, grid_search,
                    powell_minimize, projected_gradient)
from .cohort import (CohortTable, NoiseSpec, PatientRecord, add_measurement_noise,
                     derive_seed, generate_cohort, make_reference_targets,
                     perturb_coefficients)
from .inverse import (DiffusionVector, ForwardContext, MultiCostConfig,
                      context_from_profile, default_weights, identify_multi,
                      identify_single, landscape_scan, multi_patient_cost,
                      sensitivity_study, single_patient_cost)
from .config import ConstantsProfile, RunConfig, load_patient_csv, load_profile

__version__ = "0.1.0"
