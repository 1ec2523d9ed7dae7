"""Control contraction metrics: grid-certified synthesis, geodesics and tracking controllers."""

__version__ = "0.1.0"

from .controller import (DifferentialFeedback, GeodesicFeedback, LinearFeedback,
                         MinNormFeedback, SampledFeedback, TrajectorySource, feedback_continuous,
                         feedback_sampled, min_norm_control, open_loop, path_integrate,
                         sontag_rho)
from .geodesic import (DiscretizedCurve, GeodesicResult, PrimalMetricEvaluator,
                       energy_first_variation, geodesic)
from .manifold import ManifoldSpec, VirtualSystem, build_virtual, check_corollary2, verify_convergence
from .metric import (CERTIFICATE_SCOPE, CertificationError, CheckReport, DualMetric, GridSpec,
                     MetricEvaluator, Multiplier, check_ccm_rho, check_ccm_weak, check_killing,
                     transform_metric, verify_bounds)
from .polydyn import ControlAffineSystem, PolyExpr, PolyMatrix, annihilator, parse_poly
from .simulate import SimConfig, SimulationTrace, check_envelope, example1_demo, simulate
from .synthesis import (LQRProblem, SynthesisProblem, SynthesisResult, solve_are, synthesize)

__all__ = [name for name in dir() if not name.startswith("_")]
