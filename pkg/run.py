"""
Console entry point: `python run.py <verb> ...` (see app/main.py).
"""
import sys

from app.main import main

if __name__ == '__main__':
    sys.exit(main())
