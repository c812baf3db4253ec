"""Input checks shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array


def check_expression(X, n_features=None, allow_empty=False) -> np.ndarray:
    """Finite, non-negative, 2-D float64 expression matrix."""
    X = check_array(X, dtype=np.float64, ensure_2d=True,
                    ensure_min_samples=0 if allow_empty else 1)
    if np.any(X < 0):
        raise ValueError("expression values must be non-negative")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, expected {n_features}")
    return X


def check_domains(domains, n_samples, minimum=2) -> np.ndarray:
    if domains is None:
        raise ValueError("domain labels are required")
    domains = np.asarray(domains).astype(str)
    if domains.shape != (n_samples,):
        raise ValueError(f"got {domains.shape[0]} domain labels for {n_samples} cells")
    if len(np.unique(domains)) < minimum:
        raise ValueError(f"need at least {minimum} distinct domains")
    return domains
