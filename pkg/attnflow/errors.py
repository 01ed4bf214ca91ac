class AttnFlowError(Exception):
    pass


# Input-domain errors

class NotSymmetric(AttnFlowError, ValueError):
    pass


class NotPSD(AttnFlowError, ValueError):
    pass


class NotSPD(AttnFlowError, ValueError):
    pass


class IllConditioned(AttnFlowError, ValueError):
    pass


class DimensionMismatch(AttnFlowError, ValueError):
    pass


class MissingKernel(AttnFlowError, ValueError):
    pass


class UnsupportedVariant(AttnFlowError, ValueError):
    pass


class SingularA(AttnFlowError, ValueError):
    pass


class SingularSigma(AttnFlowError, ValueError):
    pass


class EmptyMask(AttnFlowError, ValueError):
    pass


class CommutationViolated(AttnFlowError, ValueError):
    pass


class SizeMismatch(AttnFlowError, ValueError):
    pass


class TooLarge(AttnFlowError, ValueError):
    pass


class MarginalMismatch(AttnFlowError, ValueError):
    pass


class OutOfDomain(AttnFlowError, ValueError):
    pass


class ConfigError(AttnFlowError, ValueError):
    pass


# Numerical-process failures

class NotConverged(AttnFlowError, RuntimeError):
    def __init__(self, max_iters: int, residual: float):
        super().__init__(f"Sinkhorn did not converge in {max_iters} iterations (marginal residual {residual:.3e})")
        self.max_iters = max_iters
        self.residual = residual


class StepFailure(AttnFlowError, RuntimeError):
    pass


class Overflow(AttnFlowError, RuntimeError):
    pass
