"""Exception hierarchy for the laboratory.

Every error derives from :class:`FBSDEError` so the CLI can map the whole
family to exit code 2 with one ``except``.
"""

from __future__ import annotations


class FBSDEError(Exception):
    """Base class of all laboratory errors."""


class DimensionMismatchError(FBSDEError, ValueError):
    """A coefficient or derivative block has the wrong shape."""


class NonFiniteOutputError(FBSDEError, ArithmeticError):
    """NaN or inf produced by a coefficient or by the scheme."""


class NoContractionError(FBSDEError, RuntimeError):
    """Inner fixed point hit ``inner_max`` with residual ratio >= 1."""

    def __init__(self, message: str, *, ratio: float, step: int | None = None,
                 node: int | None = None, segment: int | None = None):
        self.ratio = ratio
        self.step = step
        self.node = node
        self.segment = segment
        super().__init__(message)

    def located(self, *, step: int | None = None, node: int | None = None,
                segment: int | None = None) -> "NoContractionError":
        """Return a copy carrying more location detail."""
        step = self.step if step is None else step
        node = self.node if node is None else node
        segment = self.segment if segment is None else segment
        where = ", ".join(
            f"{k}={v}" for k, v in (("segment", segment), ("step", step), ("node", node))
            if v is not None
        )
        base = str(self.args[0]).split(" [at ")[0]
        return NoContractionError(f"{base} [at {where}]", ratio=self.ratio,
                                  step=step, node=node, segment=segment)


class NotContractingAtFloorError(FBSDEError, RuntimeError):
    """The delta probe reached its floor without observing contraction."""


class LipschitzExplosionError(FBSDEError, RuntimeError):
    """A measured Lip(g_i) exceeded the configured hard cap."""


class PathEscapedDomainError(FBSDEError, RuntimeError):
    """Too many forward paths left the spatial grid."""


class UnknownProblemError(FBSDEError, KeyError):
    """Problem name not present in the oracle registry."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class NoAnalyticFormError(FBSDEError, LookupError):
    """Oracle entry has no closed-form decoupling field."""


class ConfigInvalidError(FBSDEError, ValueError):
    """Experiment configuration failed validation."""
