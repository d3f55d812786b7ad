// Client-side plate validation.
// Mirrors the service's grammar rule for rule, including the error codes;
// the shared/plate_vectors.json conformance file keeps the two in lock-step.

export type PlateErrorCode =
  | "EMPTY"
  | "INVALID_CHAR"
  | "LETTERS_AFTER_DIGITS"
  | "PREFIX_LENGTH"
  | "DIGITS_MISSING"
  | "DIGITS_TOO_LONG"
  | "LEADING_ZERO";

export interface PlateValidation {
  valid: boolean;
  canonical?: string; // "HK 1" style display form
  code?: PlateErrorCode;
  message?: string;
}

const MESSAGES: Record<PlateErrorCode, string> = {
  EMPTY: "enter a plate",
  INVALID_CHAR: "letters and digits only",
  LETTERS_AFTER_DIGITS: "letters must come before digits",
  PREFIX_LENGTH: "prefix must be two letters or absent",
  DIGITS_MISSING: "need one to four digits",
  DIGITS_TOO_LONG: "at most four digits",
  LEADING_ZERO: "digits cannot start with zero",
};

function invalid(code: PlateErrorCode): PlateValidation {
  return { valid: false, code, message: MESSAGES[code] };
}

export function validatePlate(text: string): PlateValidation {
  const squashed = text.split(/\s+/).join("").toUpperCase();
  if (squashed.length === 0) return invalid("EMPTY");
  for (const ch of squashed) {
    if (!/^[A-Z0-9]$/.test(ch)) return invalid("INVALID_CHAR");
  }
  const shape = squashed.match(/^([A-Z]*)([0-9]*)$/);
  if (shape === null || shape[1].length + shape[2].length !== squashed.length) {
    return invalid("LETTERS_AFTER_DIGITS");
  }
  const letters = shape[1];
  const digits = shape[2];
  if (letters.length === 1 || letters.length > 2) return invalid("PREFIX_LENGTH");
  if (digits.length === 0) return invalid("DIGITS_MISSING");
  if (digits.length > 4) return invalid("DIGITS_TOO_LONG");
  if (digits.startsWith("0")) return invalid("LEADING_ZERO");
  const canonical = letters ? `${letters} ${digits}` : digits;
  return { valid: true, canonical };
}
