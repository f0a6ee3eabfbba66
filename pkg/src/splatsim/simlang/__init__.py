"""Scene-editing script language: parsing, planning, and sessions."""

from .cameras import camera_from_spec, parse_camera_spec
from .lang import (
    Insert,
    Locate,
    Move,
    Recolor,
    Refine,
    Remove,
    Render,
    Resize,
    Retexture,
    Simulate,
    Statement,
    Token,
    parse_program,
    print_program,
    print_statement,
    tokenize,
)
from .plan import Stage, plan_program
from .session import (
    Budgets,
    RenderResult,
    RoundResult,
    Session,
    replay_log,
    translate_external,
)

__all__ = [
    "Budgets",
    "Insert",
    "Locate",
    "Move",
    "Recolor",
    "Refine",
    "Remove",
    "Render",
    "RenderResult",
    "Resize",
    "Retexture",
    "RoundResult",
    "Session",
    "Simulate",
    "Stage",
    "Statement",
    "Token",
    "camera_from_spec",
    "parse_camera_spec",
    "parse_program",
    "plan_program",
    "print_program",
    "print_statement",
    "replay_log",
    "tokenize",
    "translate_external",
]
