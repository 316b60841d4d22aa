from pathlib import Path

import numpy as np
from jinja2 import Environment, FileSystemLoader


def _fmt(value, digits: int = 4) -> str:
    if value is None:
        return "-"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v, digits) for v in np.ravel(value)) + "]"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.{digits}g}"
    return str(value)


class TemplateManager:
    def __init__(self, root: str = None):
        # Si no se indica root, usar <paquete>/templates
        root = root or Path(__file__).resolve().parent.parent / "templates"
        self.env = Environment(
            loader=FileSystemLoader(str(root)),
            autoescape=False,
            trim_blocks=True,
            lstrip_blocks=True
        )
        self.env.filters["fmt"] = _fmt

    def render(self, template_path: str, **ctx) -> str:
        template = self.env.get_template(template_path)
        return template.render(**ctx)

    def render_custom(self, custom_template: str, **ctx) -> str:
        """Render a template string instead of a file, e.g. one given in the config."""
        template = self.env.from_string(custom_template)
        return template.render(**ctx)

    def write(self, path: str, template_path: str, **ctx) -> str:
        text = self.render(template_path, **ctx)
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
        return text
