"""Exception types shared across the package.

``DataError`` covers malformed inputs (files, hierarchies, panels) and maps to
exit code 2 in the CLI.  ``NumericalError`` covers rank or conditioning
failures and maps to exit code 3.
"""


class DataError(Exception):
    pass


class HierarchyError(DataError):
    pass


class NumericalError(Exception):
    pass
