"""Published JSON schemas for the /v1 wire format."""

import json
from importlib import resources

REQUEST = "guard_request.schema.json"
RESPONSE = "guard_response.schema.json"


def load_schema(name: str) -> dict:
    return json.loads(resources.files(__name__).joinpath(name).read_text(encoding="utf-8"))
