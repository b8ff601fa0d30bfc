import sys

from gau.cli import main

sys.exit(main())
