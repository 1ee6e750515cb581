import pytest

from cohprune import verify


def test_quick_suites_pass():
    results = verify.run_all(quick=True)
    assert [r.name for r in results] == [
        "sc_equivalence",
        "residual_bound",
        "anchor_guarantee",
        "k0_equivalence",
        "scheduler_greedy",
    ]
    assert all(r.passed for r in results)


@pytest.mark.parametrize(
    "fault,suite",
    [("skip-normalization", verify.sc_equivalence), ("greedy-argmin", verify.scheduler_greedy)],
)
def test_faults_are_caught(fault, suite):
    kwargs = {"cases": 50} if suite is verify.sc_equivalence else {}
    result = suite(fault=fault, **kwargs)
    assert not result.passed and result.to_dict()["name"] == suite.__name__


def test_drop_anchors_fault_is_caught():
    assert not verify.anchor_guarantee(fault="drop-anchors").passed
