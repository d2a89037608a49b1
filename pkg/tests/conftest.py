import sys
from pathlib import Path

# Test-side helpers (gradcheck, reference_impl) are importable as plain modules.
sys.path.insert(0, str(Path(__file__).parent))
