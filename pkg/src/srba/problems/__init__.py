from .datacleaning import DataCleaning, corrupt_labels, make_datacleaning
from .datasets import (
    Dataset,
    load_csv,
    load_dataset,
    load_libsvm,
    make_blobs,
    make_two_class,
    write_csv,
    write_libsvm,
)
from .hyperparam import HyperparamLogReg, logistic_loss, make_hyperparam_problem
from .quadratic import QuadraticBilevel, make_quadratic, trivial_problem

__all__ = [
    "DataCleaning",
    "Dataset",
    "HyperparamLogReg",
    "QuadraticBilevel",
    "corrupt_labels",
    "load_csv",
    "load_dataset",
    "load_libsvm",
    "logistic_loss",
    "make_blobs",
    "make_datacleaning",
    "make_hyperparam_problem",
    "make_quadratic",
    "make_two_class",
    "trivial_problem",
    "write_csv",
    "write_libsvm",
]
