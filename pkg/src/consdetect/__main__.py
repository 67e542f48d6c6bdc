"""Entry point for consdetect CLI."""

from consdetect.cli import app

if __name__ == "__main__":
    app()
