"""Exception hierarchy shared across the package."""


class MudGuardError(Exception):
    """Base class for all errors raised by mudguard."""


# MUD files
class MudError(MudGuardError):
    pass


class MalformedJson(MudError):
    pass


class UnsupportedAcl(MudError):
    pass


class EmptyWhitelist(MudError):
    pass


class NoPlaceholder(MudError):
    pass


class MudFetchFailed(MudError):
    pass


# CPE / configuration surface
class CpeError(MudGuardError):
    pass


class NatExhausted(CpeError):
    pass


class UnknownPath(CpeError):
    pass


class UnknownMac(CpeError):
    pass


class MarkExhausted(CpeError):
    pass


class ConfigUnreachable(CpeError):
    pass


# pipeline
class PipelineError(MudGuardError):
    pass


class UnknownCustomer(PipelineError):
    pass


class UnknownDevice(PipelineError):
    pass


class UnknownTable(PipelineError):
    pass


# DNS
class DnsError(MudGuardError):
    pass


class NxDomain(DnsError):
    pass


class NotAuthority(DnsError):
    pass


class ResolverFailure(DnsError):
    pass


# SVM
class SvmError(MudGuardError):
    pass


class NotOnLan(SvmError):
    pass


class TwoFactorFailed(SvmError):
    pass


class TwoFactorTimeout(SvmError):
    pass


class InactiveAccount(SvmError):
    pass


# harness
class ScenarioParseError(MudGuardError):
    pass


class ConfigError(MudGuardError):
    pass
