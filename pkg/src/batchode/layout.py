"""Batched state storage in cell-major (CY) or component-major (YC) order."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class Layout(str, enum.Enum):
    CY = "CY"   # all components of one cell adjacent: index c*n_comp + k
    YC = "YC"   # one component for all cells adjacent: index k*n_cells + c

    @classmethod
    def parse(cls, value):
        return value if isinstance(value, cls) else cls(str(value).upper())


def cell_view(flat, n_cells, n_comp, layout):
    """(n_cells, n_comp) view onto a flat vector stored in ``layout``; no copy."""
    if layout is Layout.CY:
        return flat.reshape(n_cells, n_comp)
    return flat.reshape(n_comp, n_cells).T


@dataclass
class CellBlock:
    n_cells: int
    n_comp: int
    layout: Layout
    data: np.ndarray

    def __post_init__(self):
        self.layout = Layout.parse(self.layout)
        self.data = np.asarray(self.data, dtype=float).reshape(-1)
        if self.data.size != self.n_cells * self.n_comp:
            raise ValueError(f"data length {self.data.size} != {self.n_cells}*{self.n_comp}")

    @classmethod
    def from_cells(cls, cells, layout=Layout.CY):
        """Build from a (n_cells, n_comp) array of per-cell states."""
        cells = np.atleast_2d(np.asarray(cells, dtype=float))
        n_cells, n_comp = cells.shape
        layout = Layout.parse(layout)
        data = cells.reshape(-1).copy() if layout is Layout.CY else cells.T.reshape(-1).copy()
        return cls(n_cells, n_comp, layout, data)

    def index(self, cell, comp):
        if self.layout is Layout.CY:
            return cell * self.n_comp + comp
        return comp * self.n_cells + cell

    def cells(self):
        return cell_view(self.data, self.n_cells, self.n_comp, self.layout)

    def copy(self):
        return CellBlock(self.n_cells, self.n_comp, self.layout, self.data.copy())


def reorder(block: CellBlock, target) -> CellBlock:
    target = Layout.parse(target)
    if target is block.layout:
        return block.copy()
    return CellBlock.from_cells(block.cells(), target)
