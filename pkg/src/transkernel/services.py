"""Kernel-service names shared by the translator (trap ids) and the runtime."""

# emulated on the host; order fixes the ServiceTrap id
EMULATED = ("spin_lock", "spin_unlock", "udelay", "msleep", "schedule",
            "tasklet_schedule", "queue_work", "jiffies_read", "halt")
# cold paths: reaching one of these in translated code forces fallback
COLD = ("warn", "alloc_slow")

SERVICE_IDS = {name: i for i, name in enumerate(EMULATED + COLD)}
UNKNOWN_ID = 0xFFF
SERVICE_NAMES = {v: k for k, v in SERVICE_IDS.items()}

# fallback reason for each cold service
COLD_REASON = {"warn": "cold-hook", "alloc_slow": "alloc-slow-path"}

IRQ_WAKE_THREAD = 2


def service_id(name: str) -> int:
    return SERVICE_IDS.get(name, UNKNOWN_ID)
