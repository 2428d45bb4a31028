"""
Entry point for the phi4-lsi toolkit.
"""

import sys

from app.main import main


if __name__ == "__main__":
    sys.exit(main())
