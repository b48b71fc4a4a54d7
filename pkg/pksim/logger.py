import logging
import datetime

class SingletonLogger:
    """Custom Singleton Logger Class."""
    _instance = None

    @classmethod
    def get_logger(cls):
        """Method to get the singleton logger instance."""
        if cls._instance is None:
            cls._instance = cls._setup_logger()
        return cls._instance

    @staticmethod
    def _setup_logger():
        """Setup logging to both console and file with timestamp."""
        # Imported here so that either config.py or this module can be imported first
        from config import config

        timestamp = datetime.datetime.now().strftime('%Y%m%d_%H%M%S')
        log_file = config.logger.LOG_DIR / f'pksim_{timestamp}.txt'

        # Groups scenario, pentest and bench output into visually separated sections
        class GroupFormatter(logging.Formatter):
            def format(self, record):
                msg = super().format(record)
                text = str(record.msg)

                if text.startswith("Running scenario:"):
                    msg = "\n" + "-"*40 + "\nScenario\n" + "-"*40 + "\n" + msg
                elif text.startswith("Pentest "):
                    msg = "\n" + "-"*40 + "\n" + msg
                elif text.startswith("Bench workload:"):
                    msg = "\n" + "-"*40 + "\nBench\n" + msg
                elif text.startswith("Verdict summary:"):
                    msg = msg + "\n" + "-"*40 + "\n"
                elif text.startswith("Suite complete"):
                    msg = "\n" + "="*80 + "\n" + msg

                return msg

        formatter = GroupFormatter('%(asctime)s - %(levelname)s - %(name)s - %(message)s')

        logger = logging.getLogger('pksim')

        # Only add handlers if they haven't been added before
        if not logger.handlers:
            file_handler = logging.FileHandler(log_file)
            file_handler.setFormatter(formatter)
            console_handler = logging.StreamHandler()
            console_handler.setFormatter(formatter)
            console_handler.setLevel(logging.WARNING)

            logger.setLevel(logging.INFO)
            logger.addHandler(file_handler)
            logger.addHandler(console_handler)

            # Prevent double logging
            logger.propagate = False

            logger.info(f'Logging to file: {log_file}')

        return logger

def setup_logger():
    """Get or create the singleton logger instance."""
    return SingletonLogger.get_logger()
