"""Allow ``python -m sidlab`` to behave exactly like the ``sidlab`` script."""

from .cli import entry

if __name__ == "__main__":
    entry()
