"""The main entrypoint of the application."""

from rethink_rm.cli import app

if __name__ == "__main__":
    app()
