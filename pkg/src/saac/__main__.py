from saac.cli import main
import sys

sys.exit(main())
