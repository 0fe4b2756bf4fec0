import sys

from gexpect.cli import main

sys.exit(main())
