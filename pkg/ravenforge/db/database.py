"""Registry database connection and session handling.

The run registry is a SQLite file at `$RAVENFORGE_HOME/registry.db`
(default `~/.local/share/ravenforge/registry.db`). The engine is created on
first use, so `.env` files loaded by the CLI can still set the location.

Usage:
    @with_session
    def my_db_function(session: Session, arg1: str) -> Result:
        ...

    # Call without a session (one is created and closed automatically)
    result = my_db_function("value")

    # Or pass an existing one
    with Session(get_engine()) as session:
        result = my_db_function("value", session=session)
"""

# ruff: noqa: F401
import os
from functools import cache
from pathlib import Path
from typing import Callable, Concatenate

from sqlalchemy.engine import Engine
from sqlmodel import Session, SQLModel, create_engine

from ravenforge.db import models  # registers the tables for metadata.create_all


def data_dir() -> Path:
    default = Path.home() / ".local" / "share" / "ravenforge"
    return Path(os.environ.get("RAVENFORGE_HOME", default)).expanduser()


@cache
def get_engine() -> Engine:
    """Engine for the registry database, creating the file and schema on first call."""
    directory = data_dir()
    directory.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{directory / 'registry.db'}")
    SQLModel.metadata.create_all(engine)
    return engine


def with_session[T, **P](func: Callable[Concatenate[Session, P], T]) -> Callable[P, T]:
    """Decorator supplying a database session to `func`.

    If the caller passes `session=...` it is used as is; otherwise a new
    session on the registry engine is opened and closed around the call.

    Args:
        func: The function to wrap, taking a Session as its first parameter

    Returns:
        A wrapped function that accepts an optional `session` keyword
    """

    def wrapper(*args: P.args, session=None, **kwargs: P.kwargs) -> T:
        if session is not None:
            return func(session, *args, **kwargs)
        with Session(get_engine()) as s:
            return func(s, *args, **kwargs)

    return wrapper
