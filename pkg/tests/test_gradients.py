"""Finite-difference checks for each primitive and composite, one seed each.

The five-seed sweep over the same cases lives in the acceptance gate.
"""
import pytest

from idnorm.gradsuite import COMPOSITES, PRIMITIVES, run_suite


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    results, _ = run_suite(seeds=[11], names={name})
    assert results and all(r.passed for r in results), [str(r.report) for r in results]


@pytest.mark.parametrize("name", sorted(COMPOSITES))
def test_composite_gradients(name):
    results, _ = run_suite(seeds=[11], names={name})
    assert results and all(r.passed for r in results), [str(r.report) for r in results]
