import sys

from qnipm.cli import main

sys.exit(main())
