"""Shared test utilities."""

import numpy as np


def grad_close(analytic, numeric, rtol=1e-4, atol=1e-9):
    """Norm-based relative agreement between gradient arrays."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    err = np.linalg.norm(analytic - numeric)
    return err <= rtol * np.linalg.norm(numeric) + atol


def assert_grads_close(analytic_list, numeric_list, rtol=1e-4, atol=1e-9):
    assert len(analytic_list) == len(numeric_list)
    for a, f in zip(analytic_list, numeric_list):
        assert grad_close(a, f, rtol=rtol, atol=atol), (
            f"gradient mismatch: rel err "
            f"{np.linalg.norm(np.asarray(a) - np.asarray(f)) / max(np.linalg.norm(f), 1e-12):.3e}"
        )
