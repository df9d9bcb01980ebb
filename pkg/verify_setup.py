"""Simple check that the toolkit imports and a reference system solves."""
import sys

print("Testing imports...")

try:
    from config import Config
    Config.validate()
    print("✓ config.py imported")
except Exception as e:
    print(f"✗ config.py failed: {e}")
    sys.exit(1)

try:
    import numpy
    import pandas
    import scipy
    import pydantic
    print(f"✓ numpy {numpy.__version__}, scipy {scipy.__version__}, pandas {pandas.__version__}, pydantic {pydantic.VERSION}")
except ImportError as e:
    print(f"✗ missing package: {e}")
    sys.exit(1)

try:
    from runner import MtlbRunner
    from app import main
    print("✓ runner.py and app.py imported")
except Exception as e:
    print(f"✗ app import failed: {e}")
    sys.exit(1)

try:
    from tools.core_linalg import BeamParams, spectral_data, validate_mtl
    from tools.dispersion import solve_dispersion

    spec = spectral_data(validate_mtl([[1.0]], [[1.0]]))
    solution = solve_dispersion(spec, BeamParams(u0=1.0, xi=1.0), 1.0)
    print(f"✓ reference line: v0={solution.v0:.6f}, gain={solution.gain:.6f}")
except Exception as e:
    print(f"✗ reference solve failed: {e}")
    sys.exit(1)

print("\n" + "=" * 50)
print("All core imports successful!")
print("=" * 50)
print(f"\nThreads: {Config.THREADS}, log level: {Config.LOG_LEVEL}, output: {Config.OUTPUT_DIR}")
print("\n✓ Ready to run: ./mtlb analyze --input system.json")
