#include "defacto/clients.hpp"

#include "defacto/hash.hpp"
#include "defacto/kvconfig.hpp"
#include "defacto/raster.hpp"

#include <httplib.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdlib>
#include <fstream>
#include <mutex>
#include <thread>

namespace defacto {

namespace {

using nlohmann::json;

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ClientError(ClientErrorKind::transport, "cannot open image: " + path.string());
    return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::string base64_encode(std::string_view data) {
    static const char* table = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
    std::string out;
    out.reserve((data.size() + 2) / 3 * 4);
    std::size_t i = 0;
    while (i + 3 <= data.size()) {
        const std::uint32_t v = (static_cast<std::uint8_t>(data[i]) << 16) |
                                (static_cast<std::uint8_t>(data[i + 1]) << 8) |
                                static_cast<std::uint8_t>(data[i + 2]);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += table[v & 63];
        i += 3;
    }
    if (i + 1 == data.size()) {
        const std::uint32_t v = static_cast<std::uint8_t>(data[i]) << 16;
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += "==";
    } else if (i + 2 == data.size()) {
        const std::uint32_t v = (static_cast<std::uint8_t>(data[i]) << 16) |
                                (static_cast<std::uint8_t>(data[i + 1]) << 8);
        out += table[(v >> 18) & 63];
        out += table[(v >> 12) & 63];
        out += table[(v >> 6) & 63];
        out += '=';
    }
    return out;
}

BBox box_from_json(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 4)
        throw ClientError(ClientErrorKind::malformed_response,
                          std::string(what) + ": box must be a 4-int array");
    for (const auto& v : j)
        if (!v.is_number_integer())
            throw ClientError(ClientErrorKind::malformed_response,
                              std::string(what) + ": box coordinates must be integers");
    BBox box{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
    if (!box.valid())
        throw ClientError(ClientErrorKind::malformed_response,
                          std::string(what) + ": degenerate box");
    return box;
}

// Response-body validators, shared by the live client and the stub so both
// paths enforce the same schema.
DescriptorSet parse_descriptors_body(const json& body) {
    if (!body.is_object() || !body.contains("descriptors") || !body["descriptors"].is_array())
        throw ClientError(ClientErrorKind::malformed_response, "descriptors: bad schema");
    std::vector<std::string> phrases;
    for (const auto& d : body["descriptors"]) {
        if (!d.is_string())
            throw ClientError(ClientErrorKind::malformed_response, "descriptors: non-string entry");
        phrases.push_back(d.get<std::string>());
    }
    try {
        return DescriptorSet::from_phrases(phrases);
    } catch (const std::invalid_argument&) {
        throw ClientError(ClientErrorKind::empty_descriptor_set, "descriptors: empty set");
    }
}

std::vector<Detection> parse_detect_body(const json& body) {
    if (!body.is_object() || !body.contains("detections") || !body["detections"].is_array())
        throw ClientError(ClientErrorKind::malformed_response, "detect: bad schema");
    std::vector<Detection> out;
    for (const auto& d : body["detections"]) {
        if (!d.is_object() || !d.contains("box") || !d.contains("phrase") || !d.contains("score") ||
            !d["phrase"].is_string() || !d["score"].is_number())
            throw ClientError(ClientErrorKind::malformed_response, "detect: bad detection entry");
        const double score = d["score"].get<double>();
        if (score < 0.0 || score > 1.0)
            throw ClientError(ClientErrorKind::malformed_response, "detect: score outside [0,1]");
        out.push_back(Detection{box_from_json(d["box"], "detect"), d["phrase"].get<std::string>(), score});
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const Detection& a, const Detection& b) { return a.score > b.score; });
    return out;
}

std::vector<BBox> parse_propose_body(const json& body) {
    if (!body.is_object() || !body.contains("boxes") || !body["boxes"].is_array())
        throw ClientError(ClientErrorKind::malformed_response, "propose: bad schema");
    std::vector<BBox> out;
    for (const auto& b : body["boxes"]) out.push_back(box_from_json(b, "propose"));
    return out;
}

std::vector<OcrItem> parse_ocr_body(const json& body, double min_confidence) {
    if (!body.is_object() || !body.contains("items") || !body["items"].is_array())
        throw ClientError(ClientErrorKind::malformed_response, "ocr: bad schema");
    std::vector<OcrItem> out;
    for (const auto& item : body["items"]) {
        if (!item.is_object() || !item.contains("box") || !item.contains("text") ||
            !item.contains("confidence") || !item["text"].is_string() ||
            !item["confidence"].is_number())
            throw ClientError(ClientErrorKind::malformed_response, "ocr: bad item entry");
        const double confidence = item["confidence"].get<double>();
        if (confidence < 0.0 || confidence > 1.0)
            throw ClientError(ClientErrorKind::malformed_response, "ocr: confidence outside [0,1]");
        if (confidence < min_confidence) continue;
        out.push_back(OcrItem{box_from_json(item["box"], "ocr"), item["text"].get<std::string>(),
                              confidence});
    }
    return out;
}

json load_fixture(const std::filesystem::path& dir, const std::string& service,
                  const std::string& name) {
    const std::filesystem::path path = dir / service / name;
    std::ifstream in(path);
    if (!in)
        throw ClientError(ClientErrorKind::fixture_missing,
                          "fixture missing: " + path.string());
    json body = json::parse(in, nullptr, false);
    if (body.is_discarded())
        throw ClientError(ClientErrorKind::malformed_response,
                          "fixture is not JSON: " + path.string());
    return body;
}

class StubServices : public EvidenceServices {
public:
    explicit StubServices(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

    DescriptorSet extract_descriptors(const ImageRef& image, const std::string& question) override {
        return parse_descriptors_body(
            load_fixture(cfg_.fixture_dir, "descriptors", descriptors_fixture_name(image, question)));
    }

    std::vector<Detection> detect(const ImageRef& image, const DescriptorSet& descriptors) override {
        if (descriptors.descriptors.empty())
            throw std::invalid_argument("detect: descriptors must be non-empty");
        return parse_detect_body(
            load_fixture(cfg_.fixture_dir, "detect", detect_fixture_name(image, descriptors)));
    }

    std::vector<BBox> propose_regions(const ImageRef& image) override {
        std::vector<BBox> boxes = parse_propose_body(
            load_fixture(cfg_.fixture_dir, "propose", propose_fixture_name(image)));
        if (boxes.empty()) {
            // Stub floor: at least the whole-image proposal.
            const ImageExtent extent = read_png_extent(image.path);
            boxes.push_back(BBox{0, 0, extent.width, extent.height});
        }
        return boxes;
    }

    std::vector<OcrItem> read_text(const ImageRef& image) override {
        return parse_ocr_body(load_fixture(cfg_.fixture_dir, "ocr", ocr_fixture_name(image)),
                              cfg_.ocr_min_confidence);
    }

private:
    ServiceConfig cfg_;
};

class HttpServices : public EvidenceServices {
public:
    explicit HttpServices(ServiceConfig cfg) : cfg_(std::move(cfg)) {}

    DescriptorSet extract_descriptors(const ImageRef& image, const std::string& question) override {
        json req = image_payload(image);
        req["question"] = question;
        return with_retries([&] { return parse_descriptors_body(post(cfg_.descriptors_url, req)); });
    }

    std::vector<Detection> detect(const ImageRef& image, const DescriptorSet& descriptors) override {
        if (descriptors.descriptors.empty())
            throw std::invalid_argument("detect: descriptors must be non-empty");
        json req = image_payload(image);
        req["phrases"] = descriptors.descriptors;
        return with_retries([&] { return parse_detect_body(post(cfg_.detect_url, req)); });
    }

    std::vector<BBox> propose_regions(const ImageRef& image) override {
        return with_retries([&] { return parse_propose_body(post(cfg_.propose_url, image_payload(image))); });
    }

    std::vector<OcrItem> read_text(const ImageRef& image) override {
        return with_retries([&] {
            return parse_ocr_body(post(cfg_.ocr_url, image_payload(image)), cfg_.ocr_min_confidence);
        });
    }

private:
    json image_payload(const ImageRef& image) const {
        json req;
        if (cfg_.send_image_url)
            req["image_url"] = image.path.string();
        else
            req["image_b64"] = base64_encode(read_file_bytes(image.path));
        return req;
    }

    json post(const std::string& url, const json& req) {
        const std::size_t split = url.find('/', url.find("//") + 2);
        const std::string host = split == std::string::npos ? url : url.substr(0, split);
        const std::string route = split == std::string::npos ? "/" : url.substr(split);

        // Requests are matched to responses by correlation id; the in-flight
        // count is bounded by the gate.
        // TODO: reuse one connection per host instead of a client per request.
        InflightGate gate(*this);
        httplib::Client client(host);
        const auto timeout = std::chrono::duration<double>(cfg_.timeout_s);
        client.set_connection_timeout(timeout);
        client.set_read_timeout(timeout);
        client.set_write_timeout(timeout);

        httplib::Headers headers{{"X-Request-Id", next_correlation_id()}};
        auto res = client.Post(route, headers, req.dump(), "application/json");
        if (!res) {
            const auto kind = res.error() == httplib::Error::ConnectionTimeout ||
                                      res.error() == httplib::Error::Read ||
                                      res.error() == httplib::Error::Write
                                  ? ClientErrorKind::timeout
                                  : ClientErrorKind::transport;
            throw ClientError(kind, "request failed: " + httplib::to_string(res.error()));
        }
        if (res->status != 200)
            throw ClientError(ClientErrorKind::transport,
                              "unexpected status " + std::to_string(res->status));
        json body = json::parse(res->body, nullptr, false);
        if (body.is_discarded())
            throw ClientError(ClientErrorKind::malformed_response, "response body is not JSON");
        return body;
    }

    template <typename Fn>
    auto with_retries(Fn&& fn) -> decltype(fn()) {
        int attempt = 0;
        for (;;) {
            try {
                return fn();
            } catch (const ClientError&) {
                if (attempt >= cfg_.retries) throw;
                const double delay = cfg_.backoff_initial_s * static_cast<double>(1 << attempt);
                std::this_thread::sleep_for(std::chrono::duration<double>(delay));
                ++attempt;
            }
        }
    }

    std::string next_correlation_id() {
        return to_hex16(mix_seed(0x1d4ef0c7u, correlation_counter_.fetch_add(1)));
    }

    class InflightGate {
    public:
        explicit InflightGate(HttpServices& owner) : owner_(owner) {
            std::unique_lock lock(owner_.inflight_mutex_);
            owner_.inflight_cv_.wait(lock, [&] { return owner_.inflight_ < owner_.cfg_.max_inflight; });
            ++owner_.inflight_;
        }
        ~InflightGate() {
            {
                std::lock_guard lock(owner_.inflight_mutex_);
                --owner_.inflight_;
            }
            owner_.inflight_cv_.notify_one();
        }

    private:
        HttpServices& owner_;
    };

    ServiceConfig cfg_;
    std::atomic<std::uint64_t> correlation_counter_{0};
    std::mutex inflight_mutex_;
    std::condition_variable inflight_cv_;
    int inflight_ = 0;
};

class RecordingServices : public EvidenceServices {
public:
    RecordingServices(std::unique_ptr<EvidenceServices> inner, std::filesystem::path out_dir)
        : inner_(std::move(inner)), out_dir_(std::move(out_dir)) {
        for (const char* service : {"descriptors", "detect", "propose", "ocr"})
            std::filesystem::create_directories(out_dir_ / service);
    }

    DescriptorSet extract_descriptors(const ImageRef& image, const std::string& question) override {
        DescriptorSet result = inner_->extract_descriptors(image, question);
        json body;
        body["descriptors"] = result.descriptors;
        save("descriptors", descriptors_fixture_name(image, question), body);
        return result;
    }

    std::vector<Detection> detect(const ImageRef& image, const DescriptorSet& descriptors) override {
        std::vector<Detection> result = inner_->detect(image, descriptors);
        json body;
        body["detections"] = json::array();
        for (const Detection& d : result)
            body["detections"].push_back(
                {{"box", {d.box.x1, d.box.y1, d.box.x2, d.box.y2}}, {"phrase", d.phrase}, {"score", d.score}});
        save("detect", detect_fixture_name(image, descriptors), body);
        return result;
    }

    std::vector<BBox> propose_regions(const ImageRef& image) override {
        std::vector<BBox> result = inner_->propose_regions(image);
        json body;
        body["boxes"] = json::array();
        for (const BBox& b : result) body["boxes"].push_back({b.x1, b.y1, b.x2, b.y2});
        save("propose", propose_fixture_name(image), body);
        return result;
    }

    std::vector<OcrItem> read_text(const ImageRef& image) override {
        std::vector<OcrItem> result = inner_->read_text(image);
        json body;
        body["items"] = json::array();
        for (const OcrItem& item : result)
            body["items"].push_back({{"box", {item.box.x1, item.box.y1, item.box.x2, item.box.y2}},
                                     {"text", item.text},
                                     {"confidence", item.confidence}});
        save("ocr", ocr_fixture_name(image), body);
        return result;
    }

private:
    void save(const std::string& service, const std::string& name, const json& body) const {
        std::ofstream out(out_dir_ / service / name, std::ios::trunc);
        out << body.dump(2) << '\n';
    }

    std::unique_ptr<EvidenceServices> inner_;
    std::filesystem::path out_dir_;
};

void apply_env_url(std::string& target, const char* name) {
    if (const char* value = std::getenv(name); value && *value) target = value;
}

}  // namespace

ServiceConfig ServiceConfig::load(const std::filesystem::path& path) {
    const KvConfig kv = KvConfig::load(path);
    kv.require_known({"mode", "descriptors_url", "detect_url", "propose_url", "ocr_url",
                      "fixture_dir", "timeout_s", "retries", "backoff_initial_s", "max_inflight",
                      "ocr_min_confidence", "send_image_url"});
    ServiceConfig cfg;
    const std::string mode = kv.get_string("mode", "stub");
    if (mode == "stub")
        cfg.mode = ServiceMode::stub;
    else if (mode == "live")
        cfg.mode = ServiceMode::live;
    else
        throw std::runtime_error("services config: mode must be stub or live");
    cfg.descriptors_url = kv.get_string("descriptors_url", "");
    cfg.detect_url = kv.get_string("detect_url", "");
    cfg.propose_url = kv.get_string("propose_url", "");
    cfg.ocr_url = kv.get_string("ocr_url", "");
    cfg.fixture_dir = kv.get_string("fixture_dir", "");
    cfg.timeout_s = kv.get_double("timeout_s", cfg.timeout_s);
    cfg.retries = static_cast<int>(kv.get_int("retries", cfg.retries));
    cfg.backoff_initial_s = kv.get_double("backoff_initial_s", cfg.backoff_initial_s);
    cfg.max_inflight = static_cast<int>(kv.get_int("max_inflight", cfg.max_inflight));
    cfg.ocr_min_confidence = kv.get_double("ocr_min_confidence", cfg.ocr_min_confidence);
    cfg.send_image_url = kv.get_string("send_image_url", "false") == "true";
    cfg.apply_env_overrides();
    return cfg;
}

void ServiceConfig::apply_env_overrides() {
    apply_env_url(descriptors_url, "DEFACTO_DESCRIPTORS_URL");
    apply_env_url(detect_url, "DEFACTO_DETECT_URL");
    apply_env_url(propose_url, "DEFACTO_PROPOSE_URL");
    apply_env_url(ocr_url, "DEFACTO_OCR_URL");
}

void ServiceConfig::validate() const {
    if (!(timeout_s > 0.0)) throw std::runtime_error("services config: timeout must be positive");
    if (retries < 0) throw std::runtime_error("services config: retries must be >= 0");
    if (mode == ServiceMode::stub) {
        if (fixture_dir.empty())
            throw std::runtime_error("services config: stub mode requires fixture_dir");
    } else {
        for (const std::string* url : {&descriptors_url, &detect_url, &propose_url, &ocr_url})
            if (url->empty())
                throw std::runtime_error("services config: live mode requires all four service URLs");
    }
}

std::string descriptors_fixture_name(const ImageRef& image, const std::string& question) {
    return image.id + "__" + to_hex16(fnv1a64(question)) + ".json";
}

std::string detect_fixture_name(const ImageRef& image, const DescriptorSet& descriptors) {
    std::string joined;
    for (const std::string& d : descriptors.descriptors) {
        joined += d;
        joined += '\n';
    }
    return image.id + "__" + to_hex16(fnv1a64(joined)) + ".json";
}

std::string propose_fixture_name(const ImageRef& image) { return image.id + ".json"; }
std::string ocr_fixture_name(const ImageRef& image) { return image.id + ".json"; }

std::unique_ptr<EvidenceServices> make_stub_services(const ServiceConfig& cfg) {
    return std::make_unique<StubServices>(cfg);
}

std::unique_ptr<EvidenceServices> make_http_services(const ServiceConfig& cfg) {
    return std::make_unique<HttpServices>(cfg);
}

std::unique_ptr<EvidenceServices> make_recording_services(std::unique_ptr<EvidenceServices> inner,
                                                          std::filesystem::path fixture_out_dir) {
    return std::make_unique<RecordingServices>(std::move(inner), std::move(fixture_out_dir));
}

std::unique_ptr<EvidenceServices> make_services(const ServiceConfig& cfg) {
    cfg.validate();
    return cfg.mode == ServiceMode::stub ? make_stub_services(cfg) : make_http_services(cfg);
}

}  // namespace defacto
