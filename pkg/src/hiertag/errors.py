"""Exception types raised across the package."""


class HierTagError(Exception):
    """Base class for all package errors."""


# hierarchy parsing
class MalformedDocument(HierTagError, ValueError):
    pass


class DuplicateFineTag(HierTagError, ValueError):
    pass


class DuplicateName(HierTagError, ValueError):
    pass


class EmptyGroup(HierTagError, ValueError):
    pass


# shapes and variants
class LengthMismatch(HierTagError, ValueError):
    pass


class ShapeMismatch(HierTagError, ValueError):
    pass


class VariantMismatch(HierTagError, ValueError):
    pass


class HierarchyMismatch(HierTagError, ValueError):
    pass


class NonScalarRoot(HierTagError, ValueError):
    pass


# data
class EmptyDataset(HierTagError, ValueError):
    pass


class MissingFile(HierTagError, FileNotFoundError):
    pass


class HeaderMismatch(HierTagError, ValueError):
    pass


class BadValue(HierTagError, ValueError):
    pass


class RaggedRows(HierTagError, ValueError):
    pass


# metrics
class DegenerateLabels(HierTagError, ValueError):
    pass


class NoObservedEntries(HierTagError, ValueError):
    pass


class IntegrityError(HierTagError):
    """A manifest hash no longer matches the file it describes."""
