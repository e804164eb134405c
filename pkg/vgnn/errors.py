"""Exception types raised by the library.

Copyright (C) 2025 vgnn-inverse contributors

This program is free software; you can redistribute it and/or modify
it under the terms of the GNU General Public License as published by
the Free Software Foundation; either version 2 of the License, or
(at your option) any later version.
"""

from typing import Optional


class VgnnError(Exception):
    """Base class for all library errors."""


class ShapeError(VgnnError, ValueError):
    """Tensor shapes or feature widths do not conform."""


class MeshError(VgnnError, ValueError):
    """Invalid mesh topology or boundary conditions."""


class SchemaError(VgnnError, ValueError):
    """A file does not follow the documented format.

    Args:
        message: Human readable description
        path: Location of the offending field, e.g. ``simulations[3].u``
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NumericalError(VgnnError, ArithmeticError):
    """A computation produced non-finite values or failed to converge.

    Args:
        message: Human readable description
        epoch: Training epoch at which the failure happened, if any
        part: Loss part that went non-finite (total, nll, kl), if any
    """

    def __init__(self, message: str, epoch: Optional[int] = None, part: Optional[str] = None):
        self.epoch = epoch
        self.part = part
        super().__init__(message)
