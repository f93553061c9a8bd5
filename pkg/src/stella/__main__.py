"""``python -m stella`` entry point."""
from .cli import main

raise SystemExit(main())
