"""Versioned prompt templates with deterministic rendering.

Templates are JSON data files shipped with the package. The rendered prompt
is task preamble, then the in-context examples, then the query block with an
empty output slot; the template version participates in provider cache keys.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError

_TEMPLATE_DIR = "data/templates"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: str
    version: str
    task_preamble: str
    input_labels: tuple[tuple[str, str], ...]  # (field, printed label), in order
    output_label: str
    examples: tuple[dict, ...]  # {"inputs": {field: text}, "output": text}

    def __post_init__(self):
        if not self.examples:
            raise ConfigError(f"template {self.template_id!r} has no in-context examples")

    def _block(self, inputs: dict[str, str], output: str | None) -> str:
        lines = []
        for field_name, label in self.input_labels:
            if field_name not in inputs:
                raise ConfigError(
                    f"template {self.template_id!r} expects field {field_name!r}"
                )
            lines.append(f"{label}: {inputs[field_name]}")
        lines.append(f"{self.output_label}:" + (f" {output}" if output is not None else ""))
        return "\n".join(lines)

    def render(self, **inputs: str) -> str:
        """Full prompt text for one request; deterministic for equal inputs."""
        blocks = [self.task_preamble]
        blocks.extend(self._block(ex["inputs"], ex["output"]) for ex in self.examples)
        blocks.append(self._block(inputs, None))
        return "\n\n".join(blocks)


def _from_payload(payload: dict) -> PromptTemplate:
    return PromptTemplate(
        template_id=payload["template_id"],
        version=str(payload["version"]),
        task_preamble=payload["task_preamble"],
        input_labels=tuple((f, l) for f, l in payload["input_labels"]),
        output_label=payload["output_label"],
        examples=tuple(payload["examples"]),
    )


def load_template(template_id: str) -> PromptTemplate:
    """Load a packaged template by id."""
    try:
        text = (
            resources.files("cvrkit")
            .joinpath(f"{_TEMPLATE_DIR}/{template_id}.json")
            .read_text("utf-8")
        )
    except FileNotFoundError as exc:
        raise ConfigError(f"unknown prompt template {template_id!r}") from exc
    return _from_payload(json.loads(text))


def load_template_file(path: str | Path) -> PromptTemplate:
    """Load a template from an explicit JSON file (for custom prompts)."""
    return _from_payload(json.loads(Path(path).read_text("utf-8")))


COMPOSE_TEMPLATE_ID = "compose_target_caption"
INSTRUCTION_TEMPLATE_ID = "generate_instruction"
CLASSIFY_TEMPLATE_ID = "classify_temporal"
