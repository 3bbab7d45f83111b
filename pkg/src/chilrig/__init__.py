"""chil-rig: deterministic controller-in-the-loop test rig for
grid-connected power-electronic plants."""

__version__ = "0.1.0"


def run_case(case):
    """Run a parsed test case once and return the engine RunResult."""
    from .testbench import run_testcase

    return run_testcase(case)
