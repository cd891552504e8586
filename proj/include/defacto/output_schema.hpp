#pragma once

#include "defacto/geometry.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace defacto {

struct BoxPrediction {
    BBox position;
    double confidence = 1.0;

    bool operator==(const BoxPrediction&) const = default;
};

/// Parsed `<think>/<bbox>/<answer>` response. Abstention is represented by
/// both `boxes` and `answer` being empty optionals — one without the other
/// cannot be constructed through parse().
struct StructuredOutput {
    std::string think;
    std::optional<std::vector<BoxPrediction>> boxes;  // nullopt = abstained
    std::optional<std::string> answer;                // nullopt = abstained

    static StructuredOutput abstention(std::string think_text = "");
    static StructuredOutput answered(std::string think_text, std::vector<BoxPrediction> boxes,
                                     std::string answer_text);

    bool operator==(const StructuredOutput&) const = default;
};

enum class FormatErrorCategory {
    missing_tag,
    malformed_box_payload,
    inconsistent_abstention,
    trailing_garbage,
    invalid_coordinates,
};

std::string_view to_string(FormatErrorCategory category);

struct FormatError {
    FormatErrorCategory category;
    std::string detail;
};

/// Value-level result of parse(); a format error is data, not a failure.
class ParseOutcome {
public:
    static ParseOutcome success(StructuredOutput out, std::vector<std::string> warnings = {});
    static ParseOutcome failure(FormatErrorCategory category, std::string detail);

    bool ok() const { return std::holds_alternative<StructuredOutput>(value_); }
    const StructuredOutput& output() const { return std::get<StructuredOutput>(value_); }
    const FormatError& error() const { return std::get<FormatError>(value_); }
    const std::vector<std::string>& warnings() const { return warnings_; }

private:
    std::variant<StructuredOutput, FormatError> value_{FormatError{}};
    std::vector<std::string> warnings_;
};

/// Total over arbitrary byte strings. Accepts, in order, `<think>..</think>`,
/// `<bbox>..</bbox>`, `<answer>..</answer>` with only whitespace between and
/// around the tags. The bbox payload is either the abstention token or a JSON
/// array of {"Position":[x1,y1,x2,y2],"Confidence":p} objects. Abstention
/// must appear in both the bbox and answer fields or the outcome is an
/// inconsistent-abstention error. Out-of-range confidence clamps to [0,1]
/// with a warning.
ParseOutcome parse(std::string_view text);

/// Canonical wire form: the three tag blocks joined by single newlines, the
/// box array without extra whitespace, confidence at up to six significant
/// digits. parse() of the result reproduces the input for any output whose
/// confidences are representable at that precision. Throws
/// std::invalid_argument if a field embeds a closing tag or the invariants
/// are violated.
std::string serialize(const StructuredOutput& out);

/// True iff both fields carry the abstention marker.
bool is_abstention(const StructuredOutput& out);

}  // namespace defacto
