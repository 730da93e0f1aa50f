"""Bayesian spatio-temporal downscaling of gridded air-pollution model output.

Monitor measurements are calibrated against chemical-transport-model output
with spatially (and optionally temporally) varying coefficients, represented
as SPDE/GMRF Matérn fields and fitted by nested Laplace-type inference.
"""

from .assembly import (
    AssembledModel, AssemblyError, GridCovariate, MisalignmentError, ModelSpec, ObservationTable,
    assemble,
)
from .inference import FitConfig, HyperParameters, FieldHyper, PosteriorBundle, fit
from .mesh import Mesh, build_mesh
from .predict import PredictionRequest, predict, summarize
from .priors import PriorConfig
from .spde import MaternParams, assemble_fem, precision_alpha2

__version__ = "0.1.0"

__all__ = [
    "AssembledModel", "AssemblyError", "FieldHyper", "FitConfig", "GridCovariate",
    "HyperParameters", "MaternParams", "Mesh", "MisalignmentError", "ModelSpec",
    "ObservationTable", "PosteriorBundle", "PredictionRequest", "PriorConfig", "assemble",
    "assemble_fem", "build_mesh", "fit", "precision_alpha2", "predict", "summarize",
]
