#include "qallm/http_json.h"

#include <chrono>
#include <thread>

#include <httplib.h>

namespace qallm {

namespace {

struct ParsedUrl {
    std::string origin;  // scheme://host[:port]
    std::string path;
};

ParsedUrl parse_url(const std::string& url) {
    auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos) throw HttpError("invalid URL '" + url + "'", 0);
    auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

nlohmann::json post_json(const std::string& url, const nlohmann::json& body,
                         const std::string& bearer_token, int timeout_seconds) {
    auto [origin, path] = parse_url(url);
    httplib::Client client(origin);
    if (!client.is_valid()) throw HttpError("unsupported URL '" + url + "'", 0);
    client.set_connection_timeout(timeout_seconds, 0);
    client.set_read_timeout(timeout_seconds, 0);
    httplib::Headers headers;
    if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);

    auto res = client.Post(path, headers, body.dump(), "application/json");
    if (!res) throw HttpError("request to " + url + " failed: " + httplib::to_string(res.error()), 0);
    if (res->status < 200 || res->status >= 300) {
        throw HttpError("request to " + url + " returned HTTP " + std::to_string(res->status),
                        res->status);
    }
    try {
        return nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error& e) {
        throw HttpError(std::string("invalid JSON from ") + url + ": " + e.what(), res->status);
    }
}

nlohmann::json with_retries(int max_retries, const std::function<nlohmann::json()>& f,
                            int base_delay_ms) {
    for (int attempt = 0;; ++attempt) {
        try {
            return f();
        } catch (const HttpError& e) {
            if (!e.retryable() || attempt >= max_retries) throw;
            std::this_thread::sleep_for(std::chrono::milliseconds(base_delay_ms << attempt));
        }
    }
}

}  // namespace qallm
