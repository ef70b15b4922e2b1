from enum import Enum, EnumMeta


class StrEnumMeta(EnumMeta):
    def __contains__(cls, item):
        if isinstance(item, str):
            return item.lower() in (member.value for member in cls)  # type: ignore
        return super().__contains__(item)


class AutoStrEnum(Enum, metaclass=StrEnumMeta):
    @staticmethod
    def _generate_next_value_(name, start, count, last_values):
        # MSE_TAC -> "mse+tac"
        return name.lower().replace("_", "+")

    def __eq__(self, other: object) -> bool:
        if isinstance(other, Enum):
            return self.value == other.value
        elif isinstance(other, str):
            return self.value == other.lower()
        return False

    def __hash__(self) -> int:
        return hash(self.value)

    def __str__(self) -> str:
        return self.value

    @classmethod
    def parse(cls, value):
        """Accept a member or its (case-insensitive) string value."""
        if isinstance(value, cls):
            return value
        if isinstance(value, str) and value in cls:
            return cls(value.lower())
        choices = ", ".join(member.value for member in cls)
        raise ValueError(f"unsupported {cls.__name__} value: {value!r} ({choices})")
