import sys

from robal.cli import main

sys.exit(main())
