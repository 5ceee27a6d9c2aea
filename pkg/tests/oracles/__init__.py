import json
from pathlib import Path

EXPECTED = json.loads((Path(__file__).with_name("expected.json")).read_text())
