import sys

from lotest.cli import main

sys.exit(main())
