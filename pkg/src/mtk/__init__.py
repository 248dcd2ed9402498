"""mtk: a small neural machine translation toolkit on numpy."""

__version__ = "0.1.0"
