#include "defacto/output_schema.hpp"

#include <nlohmann/json.hpp>

#include <cctype>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace defacto {

namespace {

using nlohmann::json;

constexpr int kMaxCoordinate = 1'000'000'000;

std::string_view trim_view(std::string_view s) {
    std::size_t b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    std::size_t e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

bool is_abstention_token(std::string_view s) {
    std::string_view t = trim_view(s);
    if (t.size() != 7) return false;
    constexpr std::string_view word = "unknown";
    for (std::size_t i = 0; i < 7; ++i)
        if (std::tolower(static_cast<unsigned char>(t[i])) != word[i]) return false;
    return true;
}

struct TagScanner {
    std::string_view text;
    std::size_t pos = 0;

    void skip_ws() {
        while (pos < text.size() && std::isspace(static_cast<unsigned char>(text[pos]))) ++pos;
    }

    bool at_literal(std::string_view lit) const {
        return text.substr(pos, lit.size()) == lit;
    }

    // Body between <name> at the current position and the first </name>.
    // Distinguishes "tag appears later behind junk" (trailing garbage) from
    // "tag absent" (missing tag).
    std::variant<std::string_view, FormatError> consume_tag(std::string_view name) {
        const std::string open = "<" + std::string(name) + ">";
        const std::string close = "</" + std::string(name) + ">";
        skip_ws();
        if (!at_literal(open)) {
            if (text.find(open, pos) != std::string_view::npos)
                return FormatError{FormatErrorCategory::trailing_garbage,
                                   "unexpected content before " + open};
            return FormatError{FormatErrorCategory::missing_tag, "expected " + open};
        }
        pos += open.size();
        std::size_t end = text.find(close, pos);
        if (end == std::string_view::npos)
            return FormatError{FormatErrorCategory::missing_tag, "missing " + close};
        std::string_view body = text.substr(pos, end - pos);
        pos = end + close.size();
        return body;
    }
};

// Payload is either the abstention token or a strict JSON array of
// {"Position":[4 ints],"Confidence":number} objects.
std::variant<std::optional<std::vector<BoxPrediction>>, FormatError>
parse_bbox_payload(std::string_view payload, std::vector<std::string>& warnings) {
    if (is_abstention_token(payload)) return std::optional<std::vector<BoxPrediction>>{};

    const json parsed = json::parse(payload, nullptr, /*allow_exceptions=*/false);
    if (parsed.is_discarded())
        return FormatError{FormatErrorCategory::malformed_box_payload, "bbox payload is not JSON"};
    if (!parsed.is_array())
        return FormatError{FormatErrorCategory::malformed_box_payload, "bbox payload is not an array"};
    if (parsed.empty())
        return FormatError{FormatErrorCategory::malformed_box_payload, "bbox array is empty"};

    std::vector<BoxPrediction> boxes;
    boxes.reserve(parsed.size());
    for (std::size_t i = 0; i < parsed.size(); ++i) {
        const json& item = parsed[i];
        const std::string where = "box " + std::to_string(i);
        if (!item.is_object() || item.size() != 2 || !item.contains("Position") ||
            !item.contains("Confidence"))
            return FormatError{FormatErrorCategory::malformed_box_payload,
                               where + ": expected {Position, Confidence}"};

        const json& position = item["Position"];
        if (!position.is_array() || position.size() != 4)
            return FormatError{FormatErrorCategory::malformed_box_payload,
                               where + ": Position must be a 4-number array"};
        int coords[4];
        for (std::size_t k = 0; k < 4; ++k) {
            if (!position[k].is_number())
                return FormatError{FormatErrorCategory::malformed_box_payload,
                                   where + ": Position entries must be numbers"};
            const double v = position[k].get<double>();
            if (!(std::floor(v) == v) || std::abs(v) > kMaxCoordinate)
                return FormatError{FormatErrorCategory::invalid_coordinates,
                                   where + ": coordinates must be integers"};
            coords[k] = static_cast<int>(v);
        }
        BBox box{coords[0], coords[1], coords[2], coords[3]};
        if (box.x1 >= box.x2 || box.y1 >= box.y2)
            return FormatError{FormatErrorCategory::malformed_box_payload,
                               where + ": zero or negative area"};

        const json& confidence = item["Confidence"];
        if (!confidence.is_number())
            return FormatError{FormatErrorCategory::malformed_box_payload,
                               where + ": Confidence must be a number"};
        double conf = confidence.get<double>();
        if (conf < 0.0 || conf > 1.0) {
            warnings.push_back(where + ": confidence clamped to [0,1]");
            conf = std::clamp(conf, 0.0, 1.0);
        }
        boxes.push_back(BoxPrediction{box, conf});
    }
    return std::optional<std::vector<BoxPrediction>>{std::move(boxes)};
}

std::string format_confidence(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

void reject_embedded_tag(const std::string& field, std::string_view close_tag) {
    if (field.find(close_tag) != std::string::npos)
        throw std::invalid_argument("serialize: field embeds " + std::string(close_tag));
}

}  // namespace

StructuredOutput StructuredOutput::abstention(std::string think_text) {
    StructuredOutput out;
    out.think = std::move(think_text);
    return out;
}

StructuredOutput StructuredOutput::answered(std::string think_text,
                                            std::vector<BoxPrediction> boxes,
                                            std::string answer_text) {
    StructuredOutput out;
    out.think = std::move(think_text);
    out.boxes = std::move(boxes);
    out.answer = std::move(answer_text);
    return out;
}

std::string_view to_string(FormatErrorCategory category) {
    switch (category) {
        case FormatErrorCategory::missing_tag: return "missing-tag";
        case FormatErrorCategory::malformed_box_payload: return "malformed-box-payload";
        case FormatErrorCategory::inconsistent_abstention: return "inconsistent-abstention";
        case FormatErrorCategory::trailing_garbage: return "trailing-garbage";
        case FormatErrorCategory::invalid_coordinates: return "invalid-coordinates";
    }
    return "unknown-category";
}

ParseOutcome ParseOutcome::success(StructuredOutput out, std::vector<std::string> warnings) {
    ParseOutcome outcome;
    outcome.value_ = std::move(out);
    outcome.warnings_ = std::move(warnings);
    return outcome;
}

ParseOutcome ParseOutcome::failure(FormatErrorCategory category, std::string detail) {
    ParseOutcome outcome;
    outcome.value_ = FormatError{category, std::move(detail)};
    return outcome;
}

ParseOutcome parse(std::string_view text) {
    TagScanner scan{text};

    auto think = scan.consume_tag("think");
    if (auto* err = std::get_if<FormatError>(&think))
        return ParseOutcome::failure(err->category, err->detail);

    auto bbox = scan.consume_tag("bbox");
    if (auto* err = std::get_if<FormatError>(&bbox))
        return ParseOutcome::failure(err->category, err->detail);

    auto answer = scan.consume_tag("answer");
    if (auto* err = std::get_if<FormatError>(&answer))
        return ParseOutcome::failure(err->category, err->detail);

    scan.skip_ws();
    if (scan.pos != text.size())
        return ParseOutcome::failure(FormatErrorCategory::trailing_garbage,
                                     "content after </answer>");

    std::vector<std::string> warnings;
    auto boxes = parse_bbox_payload(std::get<std::string_view>(bbox), warnings);
    if (auto* err = std::get_if<FormatError>(&boxes))
        return ParseOutcome::failure(err->category, err->detail);
    auto& box_list = std::get<std::optional<std::vector<BoxPrediction>>>(boxes);

    const std::string_view answer_body = std::get<std::string_view>(answer);
    const bool answer_abstains = is_abstention_token(answer_body);
    const bool boxes_abstain = !box_list.has_value();
    if (answer_abstains != boxes_abstain)
        return ParseOutcome::failure(FormatErrorCategory::inconsistent_abstention,
                                     "abstention must appear in both bbox and answer");

    StructuredOutput out;
    out.think = std::string(std::get<std::string_view>(think));
    if (!answer_abstains) {
        const std::string_view trimmed = trim_view(answer_body);
        if (trimmed.empty())
            return ParseOutcome::failure(FormatErrorCategory::inconsistent_abstention,
                                         "empty answer with concrete boxes");
        out.boxes = std::move(box_list);
        out.answer = std::string(trimmed);
    }
    return ParseOutcome::success(std::move(out), std::move(warnings));
}

std::string serialize(const StructuredOutput& out) {
    if (out.boxes.has_value() != out.answer.has_value())
        throw std::invalid_argument("serialize: boxes/answer abstention mismatch");
    reject_embedded_tag(out.think, "</think>");

    std::string text = "<think>" + out.think + "</think>\n<bbox>";
    if (!out.boxes.has_value()) {
        text += "unknown";
    } else {
        if (out.boxes->empty())
            throw std::invalid_argument("serialize: box list must be non-empty");
        text += '[';
        bool first = true;
        for (const BoxPrediction& box : *out.boxes) {
            if (!first) text += ',';
            first = false;
            text += "{\"Position\":[" + std::to_string(box.position.x1) + ',' +
                    std::to_string(box.position.y1) + ',' + std::to_string(box.position.x2) +
                    ',' + std::to_string(box.position.y2) + "],\"Confidence\":" +
                    format_confidence(box.confidence) + '}';
        }
        text += ']';
    }
    text += "</bbox>\n<answer>";
    if (!out.answer.has_value()) {
        text += "unknown";
    } else {
        if (out.answer->empty())
            throw std::invalid_argument("serialize: answer must be non-empty");
        reject_embedded_tag(*out.answer, "</answer>");
        text += *out.answer;
    }
    text += "</answer>";
    return text;
}

bool is_abstention(const StructuredOutput& out) {
    return !out.boxes.has_value() && !out.answer.has_value();
}

}  // namespace defacto
