#include "bamrl/config_json.hpp"

#include <string>

namespace bamrl {

namespace json_detail {

void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed,
                         const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    bool known = false;
    for (const char* a : allowed) known = known || key == a;
    if (!known) throw ConfigError(std::string("unknown key '") + key + "' in " + where);
  }
}

}  // namespace json_detail

void to_json(nlohmann::json& j, const ConvSpec& s) {
  j = {{"out_channels", s.out_channels}, {"kernel", s.kernel}, {"stride", s.stride},
       {"padding", s.padding}};
}

void from_json(const nlohmann::json& j, ConvSpec& s) {
  json_detail::reject_unknown_keys(j, {"out_channels", "kernel", "stride", "padding"}, "conv spec");
  s.out_channels = j.value("out_channels", s.out_channels);
  s.kernel = j.value("kernel", s.kernel);
  s.stride = j.value("stride", s.stride);
  s.padding = j.value("padding", s.padding);
}

void to_json(nlohmann::json& j, const ArchitectureConfig& c) {
  j = {{"stack", c.stack},
       {"height", c.height},
       {"width", c.width},
       {"convs", c.convs},
       {"bam_index", c.bam_index ? nlohmann::json(*c.bam_index) : nlohmann::json(nullptr)},
       {"bam_reduction", c.bam_reduction},
       {"bam_dilation", c.bam_dilation},
       {"hidden", c.hidden},
       {"actions", c.actions},
       {"value_head", c.value_head}};
}

void from_json(const nlohmann::json& j, ArchitectureConfig& c) {
  json_detail::reject_unknown_keys(j,
                                   {"stack", "height", "width", "convs", "bam_index",
                                    "bam_reduction", "bam_dilation", "hidden", "actions",
                                    "value_head"},
                                   "architecture");
  try {
    c.stack = j.value("stack", c.stack);
    c.height = j.value("height", c.height);
    c.width = j.value("width", c.width);
    if (j.contains("convs")) c.convs = j.at("convs").get<std::vector<ConvSpec>>();
    if (j.contains("bam_index")) {
      if (j.at("bam_index").is_null()) {
        c.bam_index.reset();
      } else {
        c.bam_index = j.at("bam_index").get<std::size_t>();
      }
    }
    c.bam_reduction = j.value("bam_reduction", c.bam_reduction);
    c.bam_dilation = j.value("bam_dilation", c.bam_dilation);
    c.hidden = j.value("hidden", c.hidden);
    c.actions = j.value("actions", c.actions);
    c.value_head = j.value("value_head", c.value_head);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("architecture: ") + e.what());
  }
}

}  // namespace bamrl
