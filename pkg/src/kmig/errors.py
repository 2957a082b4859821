"""Exception hierarchy shared by every kmig subsystem."""


class KmigError(Exception):
    """Base class for all simulator errors."""


class MemoryRangeError(KmigError):
    """An access or allocation fell outside the memory image."""


class AlignmentError(KmigError):
    """An address violated a page or word alignment requirement."""


class RegionOverlapError(KmigError):
    """A new region would overlap one already in the region table."""


class RegionNotFoundError(KmigError):
    """A release named a region that is not in the region table."""


class ProfileError(KmigError):
    """A layout profile is malformed or does not know a field."""


class CapacityError(KmigError):
    """Objects do not fit in the space set aside for them."""


class PlacementError(KmigError):
    """A migration destination is not inside a protected region."""


class InjectorStateError(KmigError):
    """An injector operation was called in the wrong phase."""


class InjectionTimeout(KmigError):
    """No guest syscall arrived to carry an injection within the bound."""


class InjectionFailed(KmigError):
    """The injected syscall itself returned an error."""


class ConfigError(KmigError):
    """A scenario or bench configuration is invalid."""
