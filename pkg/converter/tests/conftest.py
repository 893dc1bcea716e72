import sys
from pathlib import Path

# the converter is a script-style tool; make `import convert` work under pytest
sys.path.insert(0, str(Path(__file__).resolve().parents[1]))
