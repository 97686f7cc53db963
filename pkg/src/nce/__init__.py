"""Structure-property modeling for bi-phase random media.

Builds and analyzes the full chain: random microstructures, N-point
correlation statistics, analytic strong-contrast series for effective
conductivity and dynamic permittivity, finite-volume / frequency-domain
PDE ground truth, a learnable Bessel-Fourier PDE kernel fitted to
structure-property data, and sensitivity maps with design diagnostics.
"""

from .correlations import (CorrelationSet, SpectralDensity, S3Table,
                           average_correlations, read_correlations,
                           spectral_density, three_point, total_correlation_2,
                           total_correlation_3, two_point, write_correlations)
from .errors import (CavityError, FormatError, NCEError, NearPercolationError,
                     NumericalError, ParameterError, ResonanceError,
                     SingularContrastError, SolverError, TrainingError)
from .gridfield import (GenerationMeta, Microstructure,
                        generate_gaussian_levelset, read_field,
                        sample_patches, volume_fraction, write_field)
from .kernels import (AnalyticKernel, ContrastParam, MediumSpec, PropertyKind,
                      conduction_kernel, contrast_beta, helmholtz_green,
                      laplace_green, t_kernel)
from .model import (Dataset, KernelKind, KernelModel, LearnedKernel,
                    RidgeBaseline, TrainConfig, baseline_ridge, eval_kernel,
                    gradient, initial_kernel, loss, nce_predict,
                    project_reference_kernel, read_kernel, train, write_kernel)
from .sce import (EffectiveTensor, KernelSource, SeriesTerms, assemble_a2,
                  assemble_a3, d_hat, d_map, predict, solve_effective)
from .sensitivity import (GammaEstimate, SensitivityMap, connected_fraction,
                          exclusion_score, ridge_sensitivity_map, ring_mass,
                          sensitivity_psd, sensitivity_s2)
from .solvers import (FieldSolution, effective_conductivity,
                      effective_permittivity, solve_conduction, solve_wave)
from .special import bessel_j, bessel_j_derivative, bessel_y, hankel1

__version__ = "0.1.0"
