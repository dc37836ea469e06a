"""fe2rom: adaptive in-situ model order reduction for two-scale hexahedral
finite element dynamics."""

from .errors import (ConfigError, DivergenceError, EmptyBasisError,
                     Fe2RomError, IntegrityError, LinearSolveError, MeshError,
                     SimulationBlowUpError, SingularDeformationError)
from .fe_core import (Material, Mesh, MicroBvp, MicroSolution,
                      apply_localization, assemble_forces,
                      element_force_and_tangent, full_vector,
                      homogenize_stress, lumped_mass, neo_hookean_energy,
                      neo_hookean_stress, param_point, solve_micro_hdm,
                      unstack_param)
from .hyperreduction import (EcswTraining, ReducedMesh, build_ecsw_training,
                             hyperreduced_force, nnls_lawson_hanson,
                             solve_micro_hprom, train_reduced_mesh)
from .multiscale import (SimulationConfig, TimeHistory, central_difference_run,
                         error_report, gauss_point_deformation_gradient,
                         macro_internal_force, relative_global_error,
                         run_nonadaptive)
from .reduction import (Rob, SvdFactorization, pod_truncate,
                        residual_indicator, solve_micro_prom,
                        svd_append_column, svd_from_matrix)
from .robdb import (Database, LocalBasisEntry, initialize_db,
                    query_with_update, select_entry, split_entry,
                    update_entry, validate_database)

__version__ = "0.1.0"
