# Shatter inspection API
