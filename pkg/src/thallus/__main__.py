from thallus.cli import main
import sys
sys.exit(main())
