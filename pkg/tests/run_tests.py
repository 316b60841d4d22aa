import sys
import os

import pytest

# Add the parent directory to the Python path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

# Run the suite; the slow benchmark checks only with --slow
if __name__ == '__main__':
    start_dir = os.path.dirname(os.path.abspath(__file__))
    args = [start_dir, "-v"]
    if "--slow" in sys.argv[1:]:
        args += ["-m", "slow"]
    else:
        args += ["-m", "not slow"]
    if "--cov" in sys.argv[1:]:
        args += ["--cov=gptube", "--cov-report=term-missing"]

    # Exit with non-zero code if tests failed
    sys.exit(pytest.main(args))
