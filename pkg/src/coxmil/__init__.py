"""Attention-based MIL survival prediction with a Cox partial-likelihood loss."""
from .kernels import BACKEND
from .survcore import (
    CIndexResult,
    Cohort,
    KmCurve,
    LogrankResult,
    SurvivalRecord,
    UndefinedCIndexError,
    c_index,
    kaplan_meier,
    logrank_test,
    risk_set,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "CIndexResult",
    "Cohort",
    "KmCurve",
    "LogrankResult",
    "SurvivalRecord",
    "UndefinedCIndexError",
    "c_index",
    "kaplan_meier",
    "logrank_test",
    "risk_set",
]
