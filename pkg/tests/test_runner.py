#!/usr/bin/env python3
"""
Test Runner for SODAWideNet
===========================

Runs the pytest suites by area and provides easy test management.
The fast selection skips everything marked slow (block and end-to-end
gradient audits, the overfit run).
"""

import sys
import pathlib
from typing import List

import pytest

# Add project directories to path
project_root = pathlib.Path(__file__).parent.parent
sys.path.insert(0, str(project_root / "scripts"))

SUITES = {
    "engine": ["test_tensor_engine.py", "test_tensor_io.py"],
    "network": ["test_network_blocks.py"],
    "losses": ["test_objectives.py"],
    "metrics": ["test_saliency_metrics.py"],
    "data": ["test_data_pipeline.py"],
    "training": ["test_training.py", "test_run_config.py"],
    "audit": ["test_gradient_audit.py"],
    "cli": ["test_sodawidenet.py"],
}


def run_suite(files: List[str], label: str, include_slow: bool) -> bool:
    """Run ``files`` through pytest and report the outcome."""
    print(f"🔬 Running {label}")
    print("=" * 40)
    tests_dir = pathlib.Path(__file__).parent
    args = [str(tests_dir / name) for name in files]
    if not include_slow:
        args += ["-m", "not slow"]
    code = pytest.main(args)
    if code == 0:
        print(f"\n✅ {label} passed!")
        return True
    print(f"\n❌ {label} failed (pytest exit code {int(code)})")
    return False


def run_all_tests(include_slow: bool) -> bool:
    """Run every suite and print a summary."""
    print("🧪 SODAWideNet - Test Suite")
    print("=" * 40)
    print()

    results = {}
    for name, files in SUITES.items():
        results[name] = run_suite(files, f"{name} tests", include_slow)
        print()

    passed = sum(results.values())
    print("📊 Test Summary")
    print("=" * 20)
    print(f"Test suites passed: {passed}/{len(results)}")
    for name, ok in results.items():
        if not ok:
            print(f"  ❌ {name}")

    if all(results.values()):
        print("🎉 All tests passed!")
        return True
    print("❌ Some tests failed")
    return False


def main():
    """Main entry point."""
    import argparse

    parser = argparse.ArgumentParser(description="Run SODAWideNet tests")
    parser.add_argument("--suite", choices=sorted(SUITES), help="Run only one area")
    parser.add_argument("--slow", action="store_true", help="Include tests marked slow")
    parser.add_argument("--all", action="store_true", help="Run all suites (default)")

    args = parser.parse_args()

    if args.suite:
        success = run_suite(SUITES[args.suite], f"{args.suite} tests", args.slow)
    else:
        success = run_all_tests(args.slow)

    sys.exit(0 if success else 1)


if __name__ == "__main__":
    main()
