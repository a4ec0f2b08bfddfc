import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

# numerical properties: reproducible example streams, no wall-clock deadline
settings.register_profile("repro", derandomize=True, deadline=None)
settings.load_profile("repro")
