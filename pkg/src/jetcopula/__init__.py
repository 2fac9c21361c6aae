"""Neural copula density estimation with exact mixed partials from truncated jets."""

__version__ = "0.1.0"

from jetcopula.models import FittedModel, joint_cdf, joint_pdf  # noqa: E402
from jetcopula.training import TrainConfig, fit  # noqa: E402

__all__ = ["FittedModel", "TrainConfig", "fit", "joint_cdf", "joint_pdf", "__version__"]
