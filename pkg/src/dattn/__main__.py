import sys

from dattn.cli import main

sys.exit(main())
